from django.apps import AppConfig


class DataprepConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'dataprep'

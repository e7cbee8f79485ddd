from django.apps import AppConfig


class MplTrainerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'mpl_trainer'

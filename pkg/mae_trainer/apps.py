from django.apps import AppConfig


class MaeTrainerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'mae_trainer'

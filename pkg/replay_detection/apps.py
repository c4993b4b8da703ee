from django.apps import AppConfig


class ReplayDetectionConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'replay_detection'

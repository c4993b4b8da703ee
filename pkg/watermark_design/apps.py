from django.apps import AppConfig


class WatermarkDesignConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'watermark_design'

from django.apps import AppConfig


class PlantManagementConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'plant_management'

from django.apps import AppConfig


class KeypointsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'keypoints'

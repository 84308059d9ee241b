from django.apps import AppConfig


class PlaceRecognitionConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'place_recognition'

from django.apps import AppConfig


class PipelineAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pipeline'
    verbose_name = 'Pipeline commands'

    def ready(self):
        # import the signal receivers so they're registered
        from . import signals  # noqa: F401

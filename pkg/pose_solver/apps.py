from django.apps import AppConfig


class PoseSolverConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pose_solver'

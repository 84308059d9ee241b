"""pytest wiring: configure Django before the app test modules are imported."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
django.setup()

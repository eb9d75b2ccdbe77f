"""Configure Django for pytest (mirrors what manage.py does for `test`)."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'coda_mediation.settings')
django.setup()

import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'specmatch.settings')
django.setup()

"""Load the any2any Django settings before pytest collects the test modules."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'any2any.settings')
django.setup()

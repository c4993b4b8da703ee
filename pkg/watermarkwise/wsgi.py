"""
WSGI entry point for the WatermarkWise API (design reports and run listings).
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'watermarkwise.settings')

application = get_wsgi_application()

from __future__ import absolute_import, unicode_literals
import os
from celery import Celery


# Set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'watermarkwise.settings')

app = Celery('watermarkwise')

# Experiment runs are dispatched as tasks; configuration comes from the
# CELERY_* entries in settings.
app.config_from_object('django.conf:settings', namespace='CELERY')

# Picks up experiments.tasks.
app.autodiscover_tasks()

"""
Loads the Celery app together with Django so that ``shared_task``
experiment runs bind to it.
"""

from __future__ import absolute_import, unicode_literals

from .celery import app as celery_app

__all__ = ('celery_app',)

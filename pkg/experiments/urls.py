"""
URL configuration for the experiment-run records.
"""

from django.urls import path
from .views import ExperimentRunList, ExperimentRunDetail

urlpatterns = [
    path('runs', ExperimentRunList.as_view(), name='run-list'),
    path('runs/<int:pk>', ExperimentRunDetail.as_view(), name='run-detail'),
]

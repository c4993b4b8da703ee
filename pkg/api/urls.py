from django.urls import path
from .views import ApiStatusView, ApiRootView, DesignView


urlpatterns = [
    path('status', ApiStatusView.as_view(), name='api_status'),
    path('design', DesignView.as_view(), name='design'),
    path('', ApiRootView.as_view(), name='root_view'),
]

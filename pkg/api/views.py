import logging

from django.conf import settings
from django.utils import timezone
from rest_framework import status
from rest_framework.permissions import AllowAny
from rest_framework.response import Response
from rest_framework.views import APIView

from experiments.metrics import json_safe
from experiments.runner import budget_for, design_report
from plant_management.exceptions import WatermarkError
from plant_management.utils import first_error_message
from watermark_design.design import LqgWeights

from .serializers import DesignRequestSerializer

logger = logging.getLogger(__name__)

SERVER_START_TIME = timezone.now()


def format_uptime(uptime_duration):
    """
    Formats the uptime duration into a human-readable format.
    """
    total_seconds = int(uptime_duration.total_seconds())

    days, remainder = divmod(total_seconds, 86400)
    hours, remainder = divmod(remainder, 3600)
    minutes, seconds = divmod(remainder, 60)

    return f"{days} days, {hours} hours, {minutes} minutes, {seconds} seconds"


class ApiStatusView(APIView):
    permission_classes = [AllowAny]

    def get(self, request):
        now = timezone.now()
        return Response({
            "message": "Status, OK",
            "api_version": getattr(settings, 'API_VERSION', 'v1.0.0'),
            "server_time": now.strftime('%H:%M:%S, %Y-%m-%d'),
            "uptime": format_uptime(now - SERVER_START_TIME),
            "status_code": status.HTTP_200_OK,
        }, status=status.HTTP_200_OK)


class ApiRootView(APIView):
    permission_classes = [AllowAny]

    def get(self, request):
        return Response({
            'message': f"Welcome to the {getattr(settings, 'PROJECT_NAME', 'WatermarkWise')} API",
            'version': 'v1',
            'services': {
                'watermark_design': {
                    'available_endpoints': {
                        'design': 'POST /api/v1/design',
                    }
                },
                'experiments': {
                    'available_endpoints': {
                        'runs': 'GET /api/v1/runs',
                        'run_detail': 'GET /api/v1/runs/<id>',
                    }
                },
            },
        })


class DesignView(APIView):
    """
    POST: offline watermark design for the plant in the request body.

    The body is a model document (n, m, p, A, B, C, Q, R and optional X)
    with either ``delta`` or ``delta_frac``; without both, the budget is the
    default fraction of the optimal LQG cost.
    """
    permission_classes = [AllowAny]

    def post(self, request):
        serializer = DesignRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return Response({
                "message": first_error_message(serializer.errors),
                "status_code": status.HTTP_400_BAD_REQUEST,
            }, status=status.HTTP_400_BAD_REQUEST)

        model, weights = serializer.save()
        weights = weights or LqgWeights.identity(model.m, model.p)
        delta = serializer.validated_data.get('delta')
        delta_frac = serializer.validated_data.get('delta_frac')
        try:
            report = design_report(model, weights, budget_for(model, weights, delta, delta_frac))
        except WatermarkError as e:
            logger.error("Design request failed: %s", e)
            return Response({
                "message": str(e),
                "status_code": status.HTTP_400_BAD_REQUEST,
            }, status=status.HTTP_400_BAD_REQUEST)
        return Response(json_safe(report), status=status.HTTP_200_OK)

from django.shortcuts import get_object_or_404
from rest_framework.pagination import PageNumberPagination
from rest_framework.response import Response
from rest_framework.views import APIView

from api.serializers import ExperimentRunSerializer
from .models import ExperimentRun


class ExperimentRunPagination(PageNumberPagination):
    page_size = 10
    page_size_query_param = 'page_size'
    max_page_size = 100


class ExperimentRunList(APIView):
    """
    GET: paginated experiment runs, newest first. ``kind`` and ``status``
    query parameters filter the list.
    """

    def get(self, request):
        queryset = ExperimentRun.objects.all()
        for name in ('kind', 'status'):
            value = request.query_params.get(name)
            if value:
                queryset = queryset.filter(**{name: value})

        paginator = ExperimentRunPagination()
        page = paginator.paginate_queryset(queryset, request)
        serializer = ExperimentRunSerializer(page, many=True)
        return paginator.get_paginated_response(serializer.data)


class ExperimentRunDetail(APIView):
    def get(self, request, pk):
        run = get_object_or_404(ExperimentRun, pk=pk)
        return Response(ExperimentRunSerializer(run).data)

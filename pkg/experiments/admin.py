from django.contrib import admin
from .models import ExperimentRun


class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('id', 'kind', 'seed', 'status', 'out_dir', 'created_at', 'updated_at')
    search_fields = ('out_dir', 'error')
    list_filter = ('kind', 'status')
    ordering = ('-created_at',)
    readonly_fields = ('config', 'summary', 'error', 'created_at', 'updated_at')


admin.site.register(ExperimentRun, ExperimentRunAdmin)

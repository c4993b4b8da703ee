from django.db import models


class ExperimentRun(models.Model):
    """
    Bookkeeping for one design, simulation or attack-demo run.

    Attributes:
        kind (str): which command produced the run.
        seed (int): master seed of the run.
        config (dict): the validated experiment configuration.
        status (str): PENDING, RUNNING, COMPLETED or FAILED.
        out_dir (str): directory holding the trace, config and summary.
        summary (dict): summary metrics once the run completed.
        error (str): error message of a failed run.
    """

    class Kind(models.TextChoices):
        DESIGN = 'design', 'Offline design'
        SIMULATE = 'simulate', 'Online simulation'
        ATTACK_DEMO = 'attack-demo', 'Replay attack demo'

    class Status(models.TextChoices):
        PENDING = 'PENDING', 'Pending'
        RUNNING = 'RUNNING', 'Running'
        COMPLETED = 'COMPLETED', 'Completed'
        FAILED = 'FAILED', 'Failed'

    kind = models.CharField(max_length=20, choices=Kind.choices)
    seed = models.PositiveBigIntegerField(default=0)
    config = models.JSONField(default=dict)
    status = models.CharField(max_length=10, choices=Status.choices, default=Status.PENDING)
    out_dir = models.CharField(max_length=500, blank=True)
    summary = models.JSONField(null=True, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at', '-id']

    def __str__(self):
        return f"{self.kind} run {self.pk} (seed {self.seed}, {self.status})"

    def mark_running(self):
        self.status = self.Status.RUNNING
        self.save(update_fields=['status', 'updated_at'])

    def mark_completed(self, summary):
        self.status = self.Status.COMPLETED
        self.summary = summary
        self.save(update_fields=['status', 'summary', 'updated_at'])

    def mark_failed(self, error):
        self.status = self.Status.FAILED
        self.error = str(error)
        self.save(update_fields=['status', 'error', 'updated_at'])

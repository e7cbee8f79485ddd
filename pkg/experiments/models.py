from django.db import models


class ExperimentRun(models.Model):
    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    ]

    command = models.CharField(max_length=20)
    out_dir = models.CharField(max_length=500)
    config_digest = models.CharField(max_length=64)
    seed = models.IntegerField(null=True, blank=True)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='RUNNING')
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.command} -> {self.out_dir} ({self.status})"


class RunEvent(models.Model):
    KIND_CHOICES = [
        ('START', 'Start'),
        ('CHECKPOINT', 'Checkpoint'),
        ('EARLY_STOP', 'Early stop'),
        ('COMPLETE', 'Complete'),
        ('FAILURE', 'Failure'),
    ]

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='events')
    kind = models.CharField(max_length=12, choices=KIND_CHOICES)
    message = models.TextField(blank=True)
    step = models.IntegerField(null=True, blank=True)
    timestamp = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['timestamp', 'id']

    def __str__(self):
        return f"{self.run_id}: {self.kind} {self.message[:50]}"


class SliceMetric(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='slice_metrics')
    subject_id = models.CharField(max_length=50)
    slice_id = models.IntegerField()
    echo = models.IntegerField()
    weights = models.CharField(max_length=10, default='student')
    dice = models.FloatField()
    iou = models.FloatField()
    accuracy = models.FloatField()
    nsd = models.FloatField()
    # inf when exactly one surface is empty
    hd = models.FloatField()
    empty_surface = models.BooleanField(default=False)

    class Meta:
        ordering = ['weights', 'echo', 'subject_id', 'slice_id']

    def __str__(self):
        return f"{self.subject_id}/{self.slice_id} echo {self.echo}: dice {self.dice:.3f}"

from django.db import models


class ExperimentRun(models.Model):
    """One invocation of a management command"""
    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('DONE', 'Done'),
        ('FAILED', 'Failed'),
    ]

    command = models.CharField(max_length=50)
    config_hash = models.CharField(max_length=16, db_index=True)
    config_text = models.TextField()
    seed = models.BigIntegerField()
    version = models.CharField(max_length=20)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='RUNNING')
    output_paths = models.JSONField(default=list)
    error = models.JSONField(null=True, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f'{self.command} {self.config_hash} ({self.status})'


class SweepCell(models.Model):
    """A resumable unit of a sweep, keyed by (kind, config hash, cell id)"""
    STATUS_CHOICES = [
        ('PENDING', 'Pending'),
        ('DONE', 'Done'),
        ('FAILED', 'Failed'),
    ]

    kind = models.CharField(max_length=20)
    config_hash = models.CharField(max_length=16)
    cell_id = models.CharField(max_length=100)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='PENDING')
    seed = models.BigIntegerField()

    # Results (stored as JSON)
    rows = models.JSONField(default=list)
    diagnostics = models.JSONField(default=dict)
    error = models.JSONField(null=True, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['kind', 'cell_id']
        constraints = [
            models.UniqueConstraint(fields=['kind', 'config_hash', 'cell_id'], name='unique_sweep_cell'),
        ]

    def __str__(self):
        return f'{self.kind}:{self.cell_id} ({self.status})'

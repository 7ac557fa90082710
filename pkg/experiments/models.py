from django.db import models

# ==============================================================================
# 💡 EXPERIMENT LEDGER
# One TrainingRun per (data dir, config digest, held-out class, arm); its
# FoldEvaluation rows hold the dice report and the probe results.
# The bulky artifacts (checkpoints, reports, previews) stay on disk; the
# database keeps their paths.
# ==============================================================================


class TrainingRun(models.Model):
    STATUS_CHOICES = (
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    )
    ARM_CHOICES = (
        ('FSL', 'Fully supervised support'),
        ('SS-FSL', 'Full + weak (box) support'),
    )

    data_dir = models.CharField(max_length=500)
    config = models.JSONField()
    digest = models.CharField(max_length=64, db_index=True)
    test_class = models.PositiveSmallIntegerField()
    arm = models.CharField(max_length=10, choices=ARM_CHOICES, default='FSL')
    checkpoint_path = models.CharField(max_length=500, blank=True)
    episodes = models.PositiveIntegerField(default=0)

    # Mean losses over the last logged episodes
    final_nn_loss = models.FloatField(null=True, blank=True)
    final_wce_loss = models.FloatField(null=True, blank=True)

    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='RUNNING', db_index=True)
    error_message = models.TextField(blank=True)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['test_class', 'arm', '-started_at']

    def __str__(self):
        return f"fold {self.test_class} [{self.arm}] {self.digest[:8]} ({self.status})"


class FoldEvaluation(models.Model):
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='evaluations')
    mean_dice = models.FloatField()
    median_dice = models.FloatField()
    # [{"patient_id": p, "dice": d}, ...] in query order
    per_patient = models.JSONField(default=list)
    report_path = models.CharField(max_length=500, blank=True)
    cost_ratio = models.FloatField(null=True, blank=True)
    clustering_fraction = models.FloatField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run__test_class', 'run__arm']

    def __str__(self):
        return f"{self.run}: mean dice {self.mean_dice:.4f}"

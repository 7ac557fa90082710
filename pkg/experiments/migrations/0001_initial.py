import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="TrainingRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("data_dir", models.CharField(max_length=500)),
                ("config", models.JSONField()),
                ("digest", models.CharField(db_index=True, max_length=64)),
                ("test_class", models.PositiveSmallIntegerField()),
                (
                    "arm",
                    models.CharField(
                        choices=[
                            ("FSL", "Fully supervised support"),
                            ("SS-FSL", "Full + weak (box) support"),
                        ],
                        default="FSL",
                        max_length=10,
                    ),
                ),
                ("checkpoint_path", models.CharField(blank=True, max_length=500)),
                ("episodes", models.PositiveIntegerField(default=0)),
                ("final_nn_loss", models.FloatField(blank=True, null=True)),
                ("final_wce_loss", models.FloatField(blank=True, null=True)),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("RUNNING", "Running"),
                            ("COMPLETED", "Completed"),
                            ("FAILED", "Failed"),
                        ],
                        db_index=True,
                        default="RUNNING",
                        max_length=20,
                    ),
                ),
                ("error_message", models.TextField(blank=True)),
                ("started_at", models.DateTimeField(auto_now_add=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "ordering": ["test_class", "arm", "-started_at"],
            },
        ),
        migrations.CreateModel(
            name="FoldEvaluation",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("mean_dice", models.FloatField()),
                ("median_dice", models.FloatField()),
                ("per_patient", models.JSONField(default=list)),
                ("report_path", models.CharField(blank=True, max_length=500)),
                ("cost_ratio", models.FloatField(blank=True, null=True)),
                ("clustering_fraction", models.FloatField(blank=True, null=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="evaluations",
                        to="experiments.trainingrun",
                    ),
                ),
            ],
            options={
                "ordering": ["run__test_class", "run__arm"],
            },
        ),
    ]

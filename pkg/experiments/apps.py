from django.apps import AppConfig


class ExperimentsConfig(AppConfig):
    name = "experiments"
    verbose_name = "Run configuration, fold experiments and the results ledger"
    default_auto_field = "django.db.models.BigAutoField"

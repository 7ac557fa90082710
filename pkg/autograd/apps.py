from django.apps import AppConfig


class AutogradConfig(AppConfig):
    name = "autograd"
    verbose_name = "Tensor numerics and reverse-mode differentiation"

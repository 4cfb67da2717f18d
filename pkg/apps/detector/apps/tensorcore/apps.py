from django.apps import AppConfig


class TensorcoreConfig(AppConfig):
    name = "apps.tensorcore"
    verbose_name = "Tensors and Layers"

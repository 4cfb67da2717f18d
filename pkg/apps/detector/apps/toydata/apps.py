from django.apps import AppConfig


class ToydataConfig(AppConfig):
    name = "apps.toydata"
    verbose_name = "Synthetic Scenes"

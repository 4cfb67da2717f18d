from django.apps import AppConfig


class EpisodicConfig(AppConfig):
    name = "apps.episodic"
    verbose_name = "Episodic Training"

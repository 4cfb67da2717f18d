from django.apps import AppConfig


class MetricAppConfig(AppConfig):
    name = "apps.metric"
    verbose_name = "Distance Metrics"

from django.apps import AppConfig


class MethodmapConfig(AppConfig):
    name = 'methodmap'

from django.apps import AppConfig


class BranchingConfig(AppConfig):
    name = 'branching'
    verbose_name = 'Adaptive multi-task branching'

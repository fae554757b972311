"""
URL configuration for the branchnet project.

Only the read-only run inspection API is routed; training happens through
the management commands.
"""
from django.urls import path, include

urlpatterns = [
    path('api/runs/', include('branching.urls')),
]

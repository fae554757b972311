from django.urls import path
from . import views

urlpatterns = [
    path('', views.run_list, name='run-list'),
    path('<int:pk>/', views.run_detail, name='run-detail'),
    path('<int:pk>/architecture/', views.run_architecture, name='run-architecture'),
    path('<int:pk>/graph/', views.run_graph, name='run-graph'),
    path('<int:pk>/affinity/<int:round_index>/', views.run_affinity, name='run-affinity'),
]

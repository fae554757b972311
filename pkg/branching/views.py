from django.http import HttpResponse
from rest_framework import status
from rest_framework.decorators import api_view
from rest_framework.response import Response

from .artifacts import load_model, load_trace
from .exceptions import BranchingError
from .model_tree import export_dot
from .models import RunManager
from .serializers import RunSerializer


def _not_found(message):
    return Response({'detail': message}, status=status.HTTP_404_NOT_FOUND)


def _unreadable(run, exc):
    return Response(
        {'detail': f'artifacts of run {run["id"]} cannot be read: {exc}'},
        status=status.HTTP_409_CONFLICT,
    )


@api_view(['GET'])
def run_list(request):
    runs = RunManager().get_all()
    serializer = RunSerializer(runs, many=True)
    return Response(serializer.data, status=status.HTTP_200_OK)


@api_view(['GET', 'DELETE'])
def run_detail(request, pk):
    manager = RunManager()
    run = manager.get_by_id(pk)

    if not run:
        return _not_found('Run not found')

    if request.method == 'DELETE':
        # only the index entry goes; the run directory is left alone
        manager.delete(pk)
        return Response(status=status.HTTP_204_NO_CONTENT)

    data = dict(RunSerializer(run).data)
    try:
        trace = load_trace(run['out_dir'])
    except (BranchingError, OSError) as exc:
        return _unreadable(run, exc)
    data['trace'] = {
        'model_name': trace['model_name'],
        'init': trace['init'],
        'config': trace['config'],
        'metrics': trace['metrics'],
        'partition': trace['partition'],
        'recovery': trace.get('recovery', {}),
        'rounds': [
            {
                'round': record['round'],
                'active_layer': record['active_layer'],
                'd_star': record['decision']['d_star'],
                'widened': record['widened'],
                'param_count': record['param_count'],
                'val_loss': record['val_loss'],
            }
            for record in trace['rounds']
        ],
    }
    return Response(data, status=status.HTTP_200_OK)


@api_view(['GET'])
def run_architecture(request, pk):
    run = RunManager().get_by_id(pk)
    if not run:
        return _not_found('Run not found')
    try:
        tree = load_model(run['out_dir'])
    except (BranchingError, OSError) as exc:
        return _unreadable(run, exc)
    return Response(
        {'id': pk, 'levels': tree.describe_levels(), 'param_count': tree.param_count()},
        status=status.HTTP_200_OK,
    )


@api_view(['GET'])
def run_graph(request, pk):
    run = RunManager().get_by_id(pk)
    if not run:
        return _not_found('Run not found')
    try:
        tree = load_model(run['out_dir'])
    except (BranchingError, OSError) as exc:
        return _unreadable(run, exc)
    return HttpResponse(export_dot(tree), content_type='text/vnd.graphviz')


@api_view(['GET'])
def run_affinity(request, pk, round_index):
    run = RunManager().get_by_id(pk)
    if not run:
        return _not_found('Run not found')
    try:
        trace = load_trace(run['out_dir'])
    except (BranchingError, OSError) as exc:
        return _unreadable(run, exc)
    for record in trace['rounds']:
        if record['round'] == round_index:
            return Response({
                'round': round_index,
                'task_affinity': record['task_affinity'],
                'branch_affinity': record['branch_affinity'],
                'decision': record['decision'],
            }, status=status.HTTP_200_OK)
    return _not_found(f'Run {pk} has no round {round_index}')

from pathlib import Path

from django.conf import settings

from branching.artifacts import dump_json, write_config
from branching.datagen import SyntheticSpec, generate, probe_accuracy, save, save_truth
from branching.management.base import DATA_FILE, TRUTH_FILE, BranchingCommand
from branching.serializers import SyntheticSpecSerializer


def _int_list(text):
    return [int(part) for part in text.split(',') if part.strip()]


class Command(BranchingCommand):
    help = 'Generate a synthetic multi-task dataset with planted task groups.'

    def add_arguments(self, parser):
        defaults = settings.BRANCHING['DATA_DEFAULTS']
        parser.add_argument('--out', required=True, help='output directory for data.bgd, truth.json and config.json')
        parser.add_argument('--tasks', dest='task_count', type=int, default=defaults['task_count'],
                            help='number of tasks (default: %(default)s)')
        parser.add_argument('--groups', dest='group_count', type=int, default=defaults['group_count'],
                            help='number of planted task groups (default: %(default)s)')
        parser.add_argument('--assignment', dest='group_assignment', type=_int_list, default=None,
                            help='comma-separated group of every task (default: contiguous blocks)')
        parser.add_argument('--shape', dest='input_shape', type=_int_list,
                            default=list(defaults['input_shape']),
                            help='input shape, D or C,H,W (default: %(default)s)')
        parser.add_argument('--samples', type=int, default=defaults['samples'],
                            help='number of samples (default: %(default)s)')
        parser.add_argument('--noise', dest='label_noise', type=float, default=defaults['label_noise'],
                            help='label flip probability (default: %(default)s)')
        parser.add_argument('--spread', dest='task_spread', type=float, default=defaults['task_spread'],
                            help='spread of task read-outs around their group (default: %(default)s)')
        parser.add_argument('--hidden-width', type=int, default=defaults['hidden_width'],
                            help='hidden width of the group features (default: %(default)s)')
        parser.add_argument('--feature-width', type=int, default=defaults['feature_width'],
                            help='width of the group features (default: %(default)s)')
        parser.add_argument('--seed', type=int, default=defaults['seed'], help='generator seed (default: %(default)s)')
        parser.add_argument('--probe', action='store_true', help='also report linear-probe accuracy per task')

    def handle(self, *args, **options):
        fields = SyntheticSpecSerializer().fields
        values = {name: options[name] for name in fields if options.get(name) is not None}
        serializer = SyntheticSpecSerializer(data=values)
        serializer.is_valid(raise_exception=True)
        data = dict(serializer.validated_data)
        data['input_shape'] = tuple(data['input_shape'])
        data['group_assignment'] = tuple(data.get('group_assignment') or ())
        spec = SyntheticSpec(**data)

        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        dataset, truth = generate(spec)
        save(dataset, out / DATA_FILE)
        save_truth(truth, out / TRUTH_FILE)
        config = {'command': 'gen-data', 'spec': spec.to_dict()}
        write_config(out, config)

        summary = {'out': str(out), 'samples': dataset.size, 'tasks': dataset.task_count, 'config': config}
        if options['probe']:
            summary['probe_accuracy'] = probe_accuracy(spec)
        self.write_line(dump_json(summary))

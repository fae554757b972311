import json

from branching.artifacts import dump_json, load_model
from branching.management.base import BranchingCommand
from branching.trainer import evaluate


class Command(BranchingCommand):
    help = 'Print the metrics of a model on a dataset.'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model directory')
        parser.add_argument('--data', required=True, help='dataset file or gen-data output directory')
        parser.add_argument('--format', choices=('json', 'text'), default='json', help='output format (default: %(default)s)')

    def handle(self, *args, **options):
        tree = load_model(options['model'])
        data = self.load_data(options['data'])
        if data.task_count != tree.task_count:
            raise self.usage_error(f'model serves {tree.task_count} tasks, dataset has {data.task_count}')
        metrics = evaluate(tree, data)

        if options['format'] == 'text':
            lines = [
                f'accuracy {metrics.accuracy:.4f}',
                f'bce {metrics.bce:.4f}',
                f'top-{metrics.top_k} recall {metrics.top_k_recall}',
                f'parameters {metrics.param_count}',
            ]
            lines.extend(f'  {name}: {value:.4f}' for name, value in metrics.per_task_accuracy.items())
            lines.append('config ' + json.dumps(tree.config, sort_keys=True))
            self.write_line('\n'.join(lines))
        else:
            self.write_line(dump_json({'metrics': metrics.to_dict(), 'config': tree.config}))

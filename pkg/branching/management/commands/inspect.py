import csv
import io
import json

from branching.artifacts import dump_json, load_model
from branching.management.base import BranchingCommand


class Command(BranchingCommand):
    help = 'Print the architecture and the task grouping at every level of a model.'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model directory')
        parser.add_argument('--format', choices=('json', 'text', 'csv'), default='text',
                            help='output format (default: %(default)s)')

    def handle(self, *args, **options):
        tree = load_model(options['model'])
        levels = tree.describe_levels()

        if options['format'] == 'json':
            partition = [[tree.task_names[task] for task in group] for group in tree.output_partition()]
            self.write_line(dump_json({
                'levels': levels,
                'partition': partition,
                'param_count': tree.param_count(),
                'config': tree.config,
            }))
        elif options['format'] == 'csv':
            buffer = io.StringIO()
            writer = csv.writer(buffer, lineterminator='\n')
            writer.writerow(['level', 'kind', 'width', 'block', 'parent', 'tasks'])
            for level in levels:
                for block in level['blocks']:
                    writer.writerow([
                        level['level'], level['kind'], level['width'] or '',
                        block['id'], '' if block['parent'] is None else block['parent'], ' '.join(block['tasks']),
                    ])
            self.write_line(buffer.getvalue())
        else:
            lines = []
            for level in reversed(levels):
                width = f' {level["width"]}' if level['width'] else ''
                marker = ' (active)' if level['active'] else ''
                groups = ' | '.join(', '.join(block['tasks']) for block in level['blocks'])
                lines.append(f'L{level["level"]} {level["kind"]}{width}{marker}: {groups}')
            lines.append(f'parameters: {tree.param_count()}')
            lines.append('config ' + json.dumps(tree.config, sort_keys=True))
            self.write_line('\n'.join(lines))

from pathlib import Path

from branching.artifacts import load_model
from branching.management.base import BranchingCommand
from branching.model_tree import export_dot


class Command(BranchingCommand):
    help = 'Emit the Graphviz description of a model.'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model directory')
        parser.add_argument('--out', default=None, help='write to this file instead of standard output')
        parser.add_argument('--format', choices=('dot',), default='dot', help='output format (default: %(default)s)')

    def handle(self, *args, **options):
        text = export_dot(load_model(options['model']))
        if options['out']:
            Path(options['out']).write_text(text)
        else:
            self.write_line(text)

from pathlib import Path

from branching.artifacts import dump_json, load_model, write_config, write_json, write_model
from branching.management.base import BranchingCommand
from branching.model_tree import build_thin
from branching.nn_core import LayerSpec
from branching.somp_init import somp_init_model


class Command(BranchingCommand):
    help = 'Initialise a thin model from a wide model by simultaneous orthogonal matching pursuit.'

    def add_arguments(self, parser):
        parser.add_argument('--wide', required=True, help='wide model directory')
        parser.add_argument('--out', required=True, help='output model directory')
        self.add_train_arguments(parser, only=('omega', 'seed'))

    def handle(self, *args, **options):
        if options['omega'] < 1:
            raise self.usage_error('--omega must be a positive integer')
        wide = load_model(options['wide'])
        template = [LayerSpec.from_dict(spec) for spec in wide.config['template']]
        thin = build_thin(template, options['omega'], wide.task_count, wide.task_names, seed=options['seed'])
        tree, selections = somp_init_model(thin, wide)

        out = Path(options['out'])
        write_model(out, tree)
        selected = {str(level): result.to_dict() for level, result in selections.items()}
        write_json(out / 'somp.json', selected)
        config = {'command': 'somp-init', 'wide': options['wide'], 'omega': options['omega'], 'seed': options['seed']}
        write_config(out, config)
        self.write_line(dump_json({'out': str(out), 'param_count': tree.param_count(), 'selections': selected}))

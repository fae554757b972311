from pathlib import Path

from branching.artifacts import dump_json, write_config, write_model
from branching.management.base import BranchingCommand
from branching.trainer import evaluate, train_wide


class Command(BranchingCommand):
    help = 'Train an unbranched wide reference model for SOMP initialisation.'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='dataset file or gen-data output directory')
        parser.add_argument('--out', required=True, help='output model directory')
        parser.add_argument('--width', type=int, default=64,
                            help='thinness factor of the wide model (default: %(default)s)')
        self.add_train_arguments(parser)

    def handle(self, *args, **options):
        cfg = self.train_config(options)
        if options['width'] < 1:
            raise self.usage_error('--width must be a positive integer')
        data = self.load_data(options['data'])
        train, val = data.split(cfg.val_fraction, cfg.seed)
        tree, losses = train_wide(train, cfg, options['width'])

        out = Path(options['out'])
        write_model(out, tree)
        (out / 'curves.csv').write_text(
            'iteration,loss\n' + ''.join(f'{i},{loss!r}\n' for i, loss in enumerate(losses))
        )
        config = {'command': 'train-wide', 'data': options['data'], 'width': options['width'], 'train': cfg.to_dict()}
        write_config(out, config)
        metrics = evaluate(tree, val if val is not None else train)
        self.write_line(dump_json({'out': str(out), 'metrics': metrics.to_dict(), 'config': config}))

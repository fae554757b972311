from pathlib import Path

from branching.artifacts import dump_json, load_model, write_config, write_json
from branching.management.base import BranchingCommand
from branching.trainer import compare_initializations


class Command(BranchingCommand):
    help = 'Compare SOMP and random initialisation of the same thin model.'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='dataset file or gen-data output directory')
        parser.add_argument('--wide', required=True, help='wide model directory')
        parser.add_argument('--out', required=True, help='output directory')
        parser.add_argument('--iters', type=int, default=None,
                            help='training iterations of each run (default: --final-iters)')
        self.add_train_arguments(parser)

    def handle(self, *args, **options):
        cfg = self.train_config(options)
        iterations = options['iters'] if options['iters'] is not None else cfg.final_iters
        if iterations < 1:
            raise self.usage_error('--iters must be a positive integer')
        data = self.load_data(options['data'])
        wide = load_model(options['wide'])
        train, val = data.split(cfg.val_fraction, cfg.seed)
        comparison = compare_initializations(train, wide, cfg, iterations, held_out=val)

        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / 'compare.json', comparison.to_dict())
        (out / 'compare.csv').write_text(comparison.to_csv())
        config = {
            'command': 'compare-init',
            'data': options['data'],
            'wide': options['wide'],
            'iterations': iterations,
            'train': cfg.to_dict(),
        }
        write_config(out, config)
        self.write_line(dump_json({
            'out': str(out),
            'target': comparison.target,
            'reached_at': comparison.reached_at,
            'somp_initial': comparison.somp_initial,
            'random_initial': comparison.random_initial,
        }))

"""
Management command running the full fold experiment.

WHEN: After gen_phantoms, to fill the results table
HOW: Queues one run_fold_experiment task per (held-out class, arm); with
     eager Celery (the default) they run here one after another. Results
     land in the TrainingRun / FoldEvaluation ledger and are printed as a
     per-class table with per-arm averages, the SS-FSL minus FSL difference
     and the annotation-cost ratio of each arm
"""
from experiments.forms import load_run_config
from experiments.models import FoldEvaluation
from experiments.services import ExperimentService
from experiments.tasks import run_fold_experiment
from evaluation.services import ARM_FSL, ARM_SS_FSL
from utils.commands import PipelineCommand
from utils.exceptions import ConfigurationError
from volumes.services import DatasetService


def _fmt(value):
    return f"{value:8.4f}" if value is not None else f"{'-':>8}"


class Command(PipelineCommand):
    help = 'Train and evaluate every fold in both arms and print the results table'

    def add_arguments(self, parser):
        parser.add_argument('--data', type=str, required=True, help='Phantom directory (with manifest.json)')
        parser.add_argument('--config', type=str, required=True, help='Run config JSON file')
        parser.add_argument('--out', type=str, required=True, help='Directory for checkpoints and reports')
        parser.add_argument('--classes', type=int, nargs='*', default=None,
                            help='Held-out classes to run (default: every class)')
        parser.add_argument('--arm', choices=['both', 'fsl', 'ss-fsl'], default='both',
                            help='Which support arm(s) to run (default: both)')
        parser.add_argument('--probes', type=int, default=50,
                            help='Clustering probe episodes per fold, 0 to skip (default: 50)')

    def run(self, **options):
        run_config = load_run_config(options['config'])
        class_ids = DatasetService.class_ids(DatasetService.load(options['data']))
        classes = options['classes'] or class_ids
        missing = sorted(set(classes) - set(class_ids))
        if missing:
            raise ConfigurationError(f"classes {missing} are not in the data (classes {class_ids})")
        if options['probes'] < 0:
            raise ConfigurationError(f"--probes must be >= 0, got {options['probes']}")
        arms = {'both': [False, True], 'fsl': [False], 'ss-fsl': [True]}[options['arm']]

        evaluation_ids = []
        for test_class in classes:
            for weak_support in arms:
                self.stdout.write(f"🧪 Fold {test_class} [{ARM_SS_FSL if weak_support else ARM_FSL}]...")
                result = run_fold_experiment.delay(
                    options['data'], run_config.as_dict(), test_class, weak_support,
                    options['out'], options['probes'],
                )
                evaluation_ids.append(result.get())

        evaluations = FoldEvaluation.objects.select_related('run').filter(pk__in=evaluation_ids)
        summary = ExperimentService.summarize(evaluations)

        self.stdout.write('')
        self.stdout.write(f"{'class':>5} {ARM_FSL:>8} {ARM_SS_FSL:>8} {'diff':>8}")
        for row in summary['rows']:
            self.stdout.write(
                f"{row['class_id']:>5} {_fmt(row[ARM_FSL])} {_fmt(row[ARM_SS_FSL])} {_fmt(row['difference'])}"
            )
        average = summary['average']
        self.stdout.write(
            f"{'avg':>5} {_fmt(average[ARM_FSL])} {_fmt(average[ARM_SS_FSL])} {_fmt(average['difference'])}"
        )
        for arm, ratio in sorted(summary['cost'].items()):
            self.stdout.write(f"annotation cost ratio [{arm}]: {ratio:.1f}x")
        if average['difference'] is not None:
            direction = 'higher' if average['difference'] > 0 else 'not higher'
            self.stdout.write(f"SS-FSL mean dice is {direction} than FSL ({average['difference']:+.4f})")
        for arm, fraction in sorted(summary['clustering'].items()):
            self.stdout.write(f"worst clustering fraction [{arm}]: {fraction:.2f}")
        checks = ExperimentService.acceptance_checks(summary)
        if checks:
            self.stdout.write('')
            self.stdout.write('Frozen bounds:')
        for name, value, bound, passed in checks:
            mark = '✅' if passed else '❌'
            self.stdout.write(f"{mark} {name}: {value:.4f} (bound {bound:.2f})")
        self.stdout.write(self.style.SUCCESS(f"✅ {len(evaluation_ids)} fold experiments recorded"))

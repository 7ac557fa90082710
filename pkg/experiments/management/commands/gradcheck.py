"""
Management command running the finite-difference gradient suite.

HOW: Every differentiable op is checked in 64-bit precision over several
     random draws, then both losses are checked through the whole 16x16 model.
     Any failure exits with the numeric-failure code.
"""
from autograd.gradcheck import run_gradient_suite
from segmentation.network import model_gradient_check
from utils.commands import PipelineCommand
from utils.exceptions import NumericError


class Command(PipelineCommand):
    help = 'Check analytic gradients of every op and of the model against central differences'

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0, help='Seed for the random test inputs (default: 0)')

    def run(self, **options):
        results = run_gradient_suite(seed=options['seed'])
        results.append(model_gradient_check(seed=options['seed']))

        self.stdout.write(f"{'op':<20} {'max rel error':>14} {'tolerance':>10}  status")
        self.stdout.write('-' * 54)
        for result in results:
            status = self.style.SUCCESS('PASS') if result.passed else self.style.ERROR('FAIL')
            self.stdout.write(
                f"{result.name:<20} {result.max_rel_error:>14.3e} {result.tolerance:>10.0e}  {status}"
            )

        failed = [result.name for result in results if not result.passed]
        if failed:
            raise NumericError(f"{len(failed)} of {len(results)} gradient checks failed: {', '.join(failed)}")
        self.stdout.write(self.style.SUCCESS(f"✅ All {len(results)} gradient checks passed"))

"""
Management command to generate the synthetic phantom cohort.

WHEN: Once per seed, before any training run
HOW: Writes one image + one full-mask FSV1 file per (class, patient) and a
     manifest.json listing paths, class ids and patient ids
"""
from volumes.phantoms import generate_phantoms
from volumes.records import PhantomSpec
from volumes.services import DatasetService
from utils.commands import PipelineCommand


class Command(PipelineCommand):
    help = 'Generate synthetic organ phantoms as FSV1 files plus a manifest'

    def add_arguments(self, parser):
        parser.add_argument('--out', type=str, required=True, help='Output directory')
        parser.add_argument('--classes', type=int, default=4, help='Number of organ classes (default: 4)')
        parser.add_argument('--patients', type=int, default=20, help='Number of patients (default: 20)')
        parser.add_argument('--size', type=int, default=64, help='Slice height and width (default: 64)')
        parser.add_argument('--depth', type=int, default=32, help='Axial slice count (default: 32)')
        parser.add_argument('--seed', type=int, default=0, help='Generator seed (default: 0)')
        parser.add_argument('--noise-sigma', type=float, default=0.05,
                            help='Gaussian intensity noise (default: 0.05)')

    def run(self, **options):
        spec = PhantomSpec(
            n_classes=options['classes'],
            n_patients=options['patients'],
            dims=(options['depth'], options['size'], options['size']),
            seed=options['seed'],
            noise_sigma=options['noise_sigma'],
        )
        self.stdout.write(f'🧪 Generating {spec.n_classes} x {spec.n_patients} phantoms at {spec.dims}...')
        records = generate_phantoms(spec)
        manifest = DatasetService.write(options['out'], records, spec)
        self.stdout.write(
            self.style.SUCCESS(
                f"✅ Wrote {2 * len(manifest['entries'])} files and manifest to {options['out']}"
            )
        )

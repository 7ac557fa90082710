"""
❓ WHY THIS FILE EXISTS:
Every pipeline command reports failures the same way: the message goes to the
log and to stderr, and the process exits with the code of the error family
(2 usage/config, 3 data/format, 4 numeric). Argument parsing errors already
exit with 2 through Django's parser.
"""
import logging

from django.core.management.base import BaseCommand, CommandError

from .exceptions import FewShotError

logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """Subclasses implement `run(**options)` instead of `handle`."""

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except FewShotError as exc:
            logger.error(f"❌ {type(exc).__name__}: {exc}")
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=exc.exit_code) from exc

    def run(self, **options):
        raise NotImplementedError

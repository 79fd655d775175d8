"""
Verify command: re-checks the engine's exactness properties against
independent oracles on freshly generated problems.
"""

import logging
from typing import Dict

from engine.errors import ConfigError, NumericError

from ..base import ExperimentCommand
from .checks import CHECKS, run_checks

logger = logging.getLogger(__name__)


class VerifyCommand(ExperimentCommand):
    """
    Runs every check named in verify.checks (all of them by default) and
    writes one "check" metrics record per check. Any failure ends the run
    with a NumericError.
    """

    description = "run the oracle verification suite"

    def setup(self):
        # The checks build their own problems; no dataset or base network needed.
        unknown = [name for name in self.config["verify.checks"] if name not in CHECKS]
        if unknown:
            raise ConfigError("verify.checks", f"unknown checks {unknown}, expected some of {sorted(CHECKS)}")

    def run(self) -> Dict:
        results = run_checks(self.config["verify.checks"], self.seed)
        for result in results:
            self.emit("check", **result.to_dict())
        self.table("verify.csv", [r.to_dict() for r in results])
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise NumericError(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        logger.info(f"All {len(results)} checks passed")
        return {"checks": len(results), "passed": len(results)}

from __future__ import annotations

from typing import Dict, Optional


class AmpError(Exception):
    """Base class for toolkit errors."""


class InvalidArgumentError(AmpError, ValueError):
    pass


class BackendError(AmpError):
    def __init__(self, backend_id: str, message: str) -> None:
        super().__init__(f"{backend_id}: {message}")
        self.backend_id = backend_id


class CapabilityError(AmpError):
    def __init__(self, component_id: str, capability: str) -> None:
        super().__init__(f"{component_id} does not support {capability}")
        self.component_id = component_id
        self.capability = capability


class TransportError(AmpError):
    def __init__(self, captioner_id: str, attempts: int, cause: Optional[BaseException] = None) -> None:
        super().__init__(f"{captioner_id}: giving up after {attempts} attempts ({cause})")
        self.captioner_id = captioner_id
        self.attempts = attempts


class RefusalError(AmpError):
    def __init__(self, captioner_id: str, detail: str = "") -> None:
        super().__init__(f"{captioner_id} refused the request {detail}".rstrip())
        self.captioner_id = captioner_id


class AggregateCaptionError(AmpError):
    def __init__(self, failures: Dict[str, str]) -> None:
        lines = "; ".join(f"{cid}: {msg}" for cid, msg in failures.items())
        super().__init__(f"all captioners failed ({lines})")
        self.failures = failures


class ScaleMismatchError(AmpError):
    pass


class OracleError(AmpError):
    def __init__(self, item_id: str, cause: BaseException) -> None:
        super().__init__(f"loss oracle failed on {item_id}: {cause}")
        self.item_id = item_id


class DependencyError(AmpError):
    def __init__(self, stage: str, detail: str) -> None:
        super().__init__(f"missing output of stage '{stage}': {detail}")
        self.stage = stage


class EmptyExportError(AmpError):
    pass


class BudgetViolationError(AmpError):
    pass

from typing import Any, Dict, Optional


class DistillationError(Exception):
    """Base class for every error raised by the engine"""

    code = 'distillation_error'

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context
        self.report: Optional[Any] = None

    def to_dict(self) -> Dict[str, Any]:
        payload = {'error': self.code, 'message': self.message}
        payload.update({k: _jsonable(v) for k, v in self.context.items()})
        return payload


class EncodingMismatchError(DistillationError):
    code = 'encoding_mismatch'


class InfeasibleDepthError(DistillationError):
    code = 'infeasible_depth'


class AlignmentError(DistillationError):
    code = 'alignment'


class ResourceBoundError(DistillationError):
    code = 'resource_bound'


class TreeParseError(DistillationError):
    code = 'tree_parse'

    def __init__(self, message: str, position: int, **context: Any):
        super().__init__(f'{message} at position {position}', position=position, **context)
        self.position = position


class TrainingError(DistillationError):
    code = 'training_diverged'


class UndefinedValuationError(DistillationError):
    code = 'undefined_valuation'


class PoolCorruptionError(DistillationError):
    code = 'pool_corruption'


class ConfigError(DistillationError):
    code = 'config'

    def __init__(self, message: str, section: Optional[str] = None, key: Optional[str] = None,
                 line: Optional[int] = None):
        location = '.'.join(p for p in (section, key) if p)
        if line is not None:
            location = f'{location} (line {line})' if location else f'line {line}'
        super().__init__(f'{location}: {message}' if location else message,
                         section=section, key=key, line=line)
        self.section = section
        self.key = key
        self.line = line


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)

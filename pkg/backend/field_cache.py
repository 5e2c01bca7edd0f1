import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Union

from models import ValueField
from policy_store import FieldSampler, load_field

logger = logging.getLogger(__name__)


class FieldCache:
    """Keeps recently loaded fields (and their samplers) in memory"""

    def __init__(self, max_fields: int = 4):
        self.max_fields = max_fields
        self.fields: "OrderedDict[Path, ValueField]" = OrderedDict()
        self.samplers: Dict[Path, FieldSampler] = {}

    def get(self, path: Union[str, Path]) -> ValueField:
        """Load a field, reusing the cached copy when present"""
        key = Path(path).resolve()
        if key in self.fields:
            self.fields.move_to_end(key)
            logger.debug("field cache hit: %s", key)
            return self.fields[key]

        logger.debug("field cache miss: %s", key)
        field = load_field(key)
        self.put(key, field)
        return field

    def put(self, path: Union[str, Path], field: ValueField):
        """Register a field that is already in memory (e.g. freshly solved)"""
        key = Path(path).resolve()
        self.fields[key] = field
        self.fields.move_to_end(key)
        self.samplers.pop(key, None)

        # Keep the cache within limits
        while len(self.fields) > self.max_fields:
            evicted, _ = self.fields.popitem(last=False)
            self.samplers.pop(evicted, None)
            logger.debug("field cache evicted: %s", evicted)

    def sampler(self, path: Union[str, Path]) -> FieldSampler:
        """Interpolating sampler for a cached field"""
        field = self.get(path)
        key = Path(path).resolve()
        if key not in self.samplers:
            self.samplers[key] = FieldSampler(field)
        return self.samplers[key]

    def peek(self, path: Union[str, Path]) -> Optional[ValueField]:
        return self.fields.get(Path(path).resolve())

    def clear(self):
        """Drop every cached field"""
        self.fields.clear()
        self.samplers.clear()

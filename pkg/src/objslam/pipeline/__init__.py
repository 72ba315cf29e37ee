"""Map database, frame processing, mapping worker and dataset drivers."""

from .config import Config
from .mapdb import (MAP_SCHEMA, MapDatabase, MapObject, SemanticKeyframe, SemanticMeasurement,
                    load_map, map_from_dict, map_to_dict, save_map)
from .system import (FrameResult, MappingWorker, SemanticMapper, keyframe_count, keyframe_policy,
                     run_bundle_adjustment, try_initialize)

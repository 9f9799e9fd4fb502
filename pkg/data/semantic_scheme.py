"""
Semantic scheme loading from plain-text class tables
"""
import configparser
import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from common import SemanticScheme
from errors import ConfigurationError, SceneIOError, UnknownClassError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'
SYNTHETIC_SCHEME_PATH = CONFIG_DIR / 'synthetic_scheme.ini'
SEMANTIC_KITTI_SCHEME_PATH = CONFIG_DIR / 'semantic_kitti_scheme.ini'

# Class ids used by the synthetic generator
VEHICLE_LIKE = 10
PEDESTRIAN_LIKE = 30
CYCLIST_LIKE = 31
ROAD = 40
BUILDING = 50
UNLABELED = 0


def _parse_id_list(raw: str, section: str, key: str) -> List[int]:
    try:
        return [int(token) for token in raw.replace(',', ' ').split()]
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: expected integer class ids, got '{raw}'")


def parse_scheme(text: str) -> SemanticScheme:
    """
    Parse a semantic scheme from its INI text

    Args:
        text: Scheme text with [classes], [groups] and optional [remap] sections

    Returns:
        Validated SemanticScheme
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"Malformed scheme file: {e}")

    unknown_sections = set(parser.sections()) - {'classes', 'groups', 'remap'}
    if unknown_sections:
        raise ConfigurationError(f"Unknown scheme sections: {sorted(unknown_sections)}")
    if not parser.has_section('classes') or not parser.has_section('groups'):
        raise ConfigurationError("Scheme needs [classes] and [groups] sections")

    class_names: Dict[int, str] = {}
    for key, name in parser.items('classes'):
        try:
            class_names[int(key)] = name.strip()
        except ValueError:
            raise ConfigurationError(f"[classes] key '{key}' is not an integer class id")

    groups = dict(parser.items('groups'))
    unknown_keys = set(groups) - {'things', 'stuff', 'ignore'}
    if unknown_keys:
        raise ConfigurationError(f"Unknown [groups] keys: {sorted(unknown_keys)}")

    remap: Dict[int, int] = {}
    if parser.has_section('remap'):
        for key, value in parser.items('remap'):
            try:
                remap[int(key)] = int(value)
            except ValueError:
                raise ConfigurationError(f"[remap] {key} = {value}: expected integer ids")

    scheme = SemanticScheme(
        class_names=class_names,
        things=frozenset(_parse_id_list(groups.get('things', ''), 'groups', 'things')),
        stuff=frozenset(_parse_id_list(groups.get('stuff', ''), 'groups', 'stuff')),
        ignore=frozenset(_parse_id_list(groups.get('ignore', ''), 'groups', 'ignore')),
        remap=remap,
    )
    missing_targets = set(remap.values()) - set(class_names)
    if missing_targets:
        raise ConfigurationError(f"[remap] targets without a class entry: {sorted(missing_targets)}")
    return scheme


def load_scheme(path: Union[str, Path]) -> SemanticScheme:
    """
    Load a semantic scheme file

    Args:
        path: Path to the scheme INI file

    Returns:
        Validated SemanticScheme
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise SceneIOError(path, f"cannot read scheme: {e.strerror or e}")
    scheme = parse_scheme(text)
    logger.debug(f"Loaded scheme {path} with {len(scheme.class_names)} classes")
    return scheme


def synthetic_scheme() -> SemanticScheme:
    """Scheme matching the synthetic generator's class menu"""
    return load_scheme(SYNTHETIC_SCHEME_PATH)


def remap_classes(semantic: np.ndarray, scheme: SemanticScheme) -> np.ndarray:
    """
    Apply the scheme's raw-id remapping

    Args:
        semantic: Raw semantic ids
        scheme: Scheme whose remap table is applied

    Returns:
        Remapped semantic ids (unmapped ids pass through)
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    if not scheme.remap:
        return semantic
    remapped = semantic.copy()
    for raw_id, class_id in scheme.remap.items():
        remapped[semantic == raw_id] = class_id
    return remapped


def check_known_classes(semantic: np.ndarray, scheme: SemanticScheme, what: str = 'labels'):
    """Raise UnknownClassError for ids the scheme does not declare"""
    unknown = np.setdiff1d(np.unique(semantic), sorted(scheme.class_names))
    if len(unknown):
        raise UnknownClassError(f"{what} contain undeclared class ids: {unknown.tolist()}")

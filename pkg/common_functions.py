import os, logging, json, csv, io
import configparser
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration value, carrying the offending field and, when known, its line."""

    def __init__(self, field: str, message: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = f"{field} (line {line})" if line is not None else field
        super().__init__(f"{where}: {message}")


def setup_logging():
    '''
    Configura o logging com uma variável LOGLEVEL para definir o nível de log.

    Returns:
        logging.Logger: Objeto de log configurado.

    Raises:
        ValueError: Se LOGLEVEL não for um nível conhecido.
    '''

    # Define o nível de log padrão
    loglevel = os.getenv("LOGLEVEL", "INFO").upper() # Padrão: INFO
    numeric_level = getattr(logging, loglevel, None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Invalid log level: {loglevel}")

    logging.basicConfig(level=numeric_level, format='%(asctime)s - %(levelname)s - %(message)s')
    logger = logging.getLogger("etmhe")
    logger.info(f"Logging level set to: {loglevel}")
    return logger


def load_config(logger: logging.Logger, config_path: str = 'config.ini') -> configparser.ConfigParser:
    """
    Load an experiment configuration from an INI file.

    Args:
        logger (logging.Logger): Logger instance.
        config_path (str): Path to the configuration file.

    Returns:
        ConfigParser: Loaded configuration object.

    Raises:
        FileNotFoundError: If the configuration file does not exist.
        ConfigError: If the file is not valid INI.
    """
    logger.debug(f"Attempting to load configuration from: {config_path}")
    if not os.path.exists(config_path):
        logger.error(f"Configuration file not found: {config_path}")
        raise FileNotFoundError(f"Configuration file not found: {config_path}")
    try:
        config = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        config.read(config_path)
        logger.info(f"Configuration loaded from {config_path}")
        return config
    except configparser.Error as e:
        logger.error(f"Error loading configuration: {str(e)}")
        raise ConfigError(config_path, str(e), getattr(e, "lineno", None)) from e


def config_line(path: Optional[str], section: str, key: Optional[str] = None) -> Optional[int]:
    """1-based line of ``[section]`` or of ``key`` inside it, None when not found."""
    if not path or not os.path.exists(path):
        return None
    current = None
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if key is None and current == section:
                    return number
            elif current == section and key is not None:
                name = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
                if name == key.lower():
                    return number
    return None


def validate_config_keys(logger: logging.Logger, config: configparser.ConfigParser,
                         allowed: Mapping[str, Iterable[str]], config_path: Optional[str] = None) -> None:
    """
    Reject sections and keys that are not in the allow-list.

    Args:
        logger (logging.Logger): Logger instance.
        config (ConfigParser): Parsed configuration.
        allowed (Mapping[str, Iterable[str]]): Allowed keys per section; a value of ``None`` allows any key.
        config_path (str): Source file, used to report line numbers.

    Raises:
        ConfigError: On the first unknown section or key.
    """
    for section in config.sections():
        if section not in allowed:
            logger.error(f"Unknown configuration section [{section}]")
            raise ConfigError(f"[{section}]", "unknown section", config_line(config_path, section))
        keys = allowed[section]
        if keys is None:
            continue
        keys = set(keys)
        for key in config[section]:
            if key not in keys and key not in config.defaults():
                logger.error(f"Unknown configuration key {section}.{key}")
                raise ConfigError(f"{section}.{key}", "unknown key", config_line(config_path, section, key))


def parse_matrix(text: str, field: str = "matrix") -> np.ndarray:
    """Parse ``[[a, b], [c, d]]``, ``[a, b]`` or a scalar into a 2-D array."""
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(field, f"not a matrix literal: {text!r}") from e
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ConfigError(field, f"expected a finite 2-D matrix, got {text!r}")
    return arr


def parse_vector(text: str, field: str = "vector") -> np.ndarray:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(field, f"not a vector literal: {text!r}") from e
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigError(field, f"expected a flat vector, got {text!r}")
    return arr


def get_schema_path(logger: logging.Logger, base_path: str, name: str) -> str:
    """
    Get the schema file path for a given artifact or message kind.

    Args:
        logger (logging.Logger): Logger instance.
        base_path (str): The base path where schema files are stored.
        name (str): The name of the artifact.

    Returns:
        str: The full path to the schema file.
    """
    logger.debug(f"Getting schema path for: {name}")
    return os.path.join(base_path, "schemas", f"{name}.json")


def load_schema(logger: logging.Logger, base_path: str, name: str) -> dict:
    """
    Load a ``{"fields": [...]}`` schema document.

    Raises:
        FileNotFoundError: If the schema file does not exist.
    """
    path = get_schema_path(logger, base_path, name)
    if not os.path.exists(path):
        logger.error(f"Schema file not found: {path}")
        raise FileNotFoundError(f"Schema file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def schema_columns(schema: dict, sizes: Optional[Mapping[str, int]] = None) -> List[str]:
    """Flat column names; ``array<double>`` fields expand to ``name_1 .. name_n`` using ``sizes``."""
    sizes = sizes or {}
    columns = []
    for f in schema["fields"]:
        if f["type"].startswith("array"):
            n = sizes.get(f["name"])
            if n is None:
                raise ValueError(f"Size of array field {f['name']} is required")
            columns.extend(f"{f['name']}_{i}" for i in range(1, n + 1))
        else:
            columns.append(f["name"])
    return columns


_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, (int, np.integer)) and not isinstance(v, bool),
    "double": lambda v: isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, (bool, np.bool_)),
}


def validate_record(schema: dict, record: Mapping[str, object]) -> None:
    """
    Check a record against a schema: all non-nullable fields present and typed.

    Raises:
        ValueError: On a missing, unexpected or mistyped field.
    """
    names = {f["name"] for f in schema["fields"]}
    extra = set(record) - names
    if extra:
        raise ValueError(f"Unexpected fields: {sorted(extra)}")
    for f in schema["fields"]:
        value = record.get(f["name"])
        if value is None:
            if not f.get("nullable", False):
                raise ValueError(f"Missing field: {f['name']}")
            continue
        kind = f["type"]
        if kind.startswith("array<"):
            inner = kind[len("array<"):-1]
            if not isinstance(value, (list, tuple, np.ndarray)) or not all(_TYPE_CHECKS[inner](v) for v in value):
                raise ValueError(f"Field {f['name']} is not {kind}")
        elif not _TYPE_CHECKS[kind](value):
            raise ValueError(f"Field {f['name']} is not {kind}")


def format_value(value) -> str:
    """Round-trippable text for a CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(logger: logging.Logger, path: str, columns: Sequence[str], rows: Iterable[Sequence],
              header_lines: Sequence[str] = ()) -> str:
    """
    Write rows to a CSV file with ``#`` provenance lines on top.

    Args:
        logger (logging.Logger): Logger instance.
        path (str): Destination file.
        columns (Sequence[str]): Column names, usually from ``schema_columns``.
        rows (Iterable[Sequence]): Row values, flattened in column order.
        header_lines (Sequence[str]): Lines written as ``# line`` before the column header.

    Returns:
        str: The path written.

    Raises:
        ValueError: If a row does not match the column count.
    """
    buffer = io.StringIO()
    for line in header_lines:
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    count = 0
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"Row {count} has {len(row)} values, expected {len(columns)}")
        writer.writerow([format_value(v) for v in row])
        count += 1
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buffer.getvalue())
    except Exception as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise
    logger.info(f"Wrote {count} rows to {path}")
    return path


def resolve_threads(logger: logging.Logger) -> int:
    """
    Worker count for parallel runs, capped by ``ETMHE_THREADS``.

    Raises:
        ConfigError: If ``ETMHE_THREADS`` is not a positive integer.
    """
    cpus = os.cpu_count() or 1
    raw = os.getenv("ETMHE_THREADS")
    if raw is None:
        return cpus
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError("ETMHE_THREADS", f"not an integer: {raw!r}")
    if threads < 1:
        raise ConfigError("ETMHE_THREADS", f"must be at least 1, got {threads}")
    logger.debug(f"Parallel runs capped at {threads} workers")
    return threads


def config_echo(values: Mapping[str, Mapping[str, object]]) -> List[str]:
    """``section.key = value`` lines of a resolved configuration, sorted for stable output."""
    lines = []
    for section in sorted(values):
        for key in sorted(values[section]):
            lines.append(f"{section}.{key} = {values[section][key]}")
    return lines

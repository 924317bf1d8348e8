import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import yaml
from tqdm import tqdm

from errors import ConfigError

logger = logging.getLogger(__name__)

# Attributes every LogRecord has; anything else came in through `extra=`
_RECORD_FIELDS = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    """One JSON object per log line, with `extra=` fields merged in"""

    def format(self, record):
        payload = {
            'time': datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RECORD_FIELDS and not key.startswith('_'):
                payload[key] = value
        if record.exc_info:
            payload['exc_info'] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, sort_keys=True)


def setup_logging(log_dir="logs", level="INFO", json_logs=True):
    """Configure root logging with a file and a console handler"""
    Path(log_dir).mkdir(parents=True, exist_ok=True)
    formatter = (
        JsonFormatter() if json_logs
        else logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    )
    handlers = [
        logging.FileHandler(Path(log_dir) / 'forge.log', encoding='utf-8'),
        logging.StreamHandler(),
    ]
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.basicConfig(level=level, handlers=handlers, force=True)


def load_yaml(path):
    """Load a YAML mapping; an empty file yields an empty dict"""
    try:
        with open(path, 'r', encoding='utf-8') as file:
            data = yaml.safe_load(file)
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return data


@contextmanager
def atomic_write(path, mode='w', encoding='utf-8', newline=None):
    """Write through a temp file in the destination directory, then rename into place

    The final name only ever holds a complete file; on error the temp file is removed.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    os.close(fd)
    kwargs = {} if 'b' in mode else {'encoding': encoding, 'newline': newline}
    try:
        with open(tmp_name, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def ordered_map(fn, items, workers=1, desc=None):
    """Apply fn to every item on a thread pool, returning results in input order"""
    items = list(items)
    if not items:
        return []
    show_progress = desc is not None and logger.isEnabledFor(logging.INFO)
    if workers <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=not show_progress)]

    results = [None] * len(items)
    max_workers = min(max(1, workers), len(items))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc, disable=not show_progress):
            results[futures[future]] = future.result()
    return results

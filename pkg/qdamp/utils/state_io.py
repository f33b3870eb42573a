"""
State and report files.

CSV states carry one header row (D, N, L, time_tag) followed by re, im rows
in row-major axis order. Binary states are little-endian float64: the same
four header numbers, then interleaved re/im values.
"""
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from qdamp.errors import GridError, StateFormatError
from qdamp.models import Grid, State, _plain

logger = logging.getLogger(__name__)

HEADER_COLUMNS = ['D', 'N', 'L', 'time_tag']
VALUE_COLUMNS = ['re', 'im']


# ==================== CSV STATES ====================

def write_state_csv(state, path):
    """Write the header row, then one re, im row per grid point."""
    path = Path(path)
    grid = state.grid
    header = pd.DataFrame([[grid.dim, grid.points, grid.half_width, state.time_tag]], columns=HEADER_COLUMNS)
    body = pd.DataFrame({'re': state.flat.real, 'im': state.flat.imag})
    with path.open('w', newline='') as handle:
        header.to_csv(handle, index=False, float_format='%.17g')
        body.to_csv(handle, index=False, float_format='%.17g')
    return path


def _read_header(path):
    try:
        header = pd.read_csv(path, nrows=1)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise StateFormatError(f'Error reading state file: {str(e)}')
    missing = [col for col in HEADER_COLUMNS if col not in header.columns]
    if missing or header.empty:
        raise StateFormatError(f'Missing required header columns: {missing or HEADER_COLUMNS}')
    row = header.iloc[0]
    try:
        D, N, L, t = int(row['D']), int(row['N']), float(row['L']), float(row['time_tag'])
        return Grid(D, N, L), t
    except (TypeError, ValueError) as e:
        raise StateFormatError(f'Header: {str(e)}')
    except GridError as e:
        raise StateFormatError(f'Header: {e.message}')


def read_state_csv(path):
    """
    Read a CSV state. Every malformed value row is collected as
    'Row <n>: <message>' (n is the 1-based file line) and raised together.
    """
    grid, time_tag = _read_header(path)
    try:
        body = pd.read_csv(path, skiprows=2, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise StateFormatError(f'Error reading state values: {str(e)}')
    missing = [col for col in VALUE_COLUMNS if col not in body.columns]
    if missing:
        raise StateFormatError(f'Missing required value columns: {missing}')

    errors = []
    values = np.zeros(len(body), dtype=np.complex128)
    for idx, row in body.iterrows():
        try:
            re, im = float(row['re']), float(row['im'])
            if not (np.isfinite(re) and np.isfinite(im)):
                raise ValueError('non-finite value')
            values[idx] = complex(re, im)
        except (TypeError, ValueError) as e:
            errors.append(f'Row {idx + 4}: {str(e)}')

    if len(body) != grid.size:
        errors.append(f'expected {grid.size} value rows for {grid.to_dict()}, found {len(body)}')
    if errors:
        logger.warning('state file %s has %d malformed row(s)', path, len(errors))
        raise StateFormatError(f'malformed state file {Path(path).name}: {errors[0]}', errors=errors)
    return State(grid, values, time_tag)


# ==================== BINARY STATES ====================

def write_state_binary(state, path):
    path = Path(path)
    grid = state.grid
    header = np.array([grid.dim, grid.points, grid.half_width, state.time_tag], dtype='<f8')
    body = np.empty(2 * grid.size, dtype='<f8')
    body[0::2] = state.flat.real
    body[1::2] = state.flat.imag
    path.write_bytes(header.tobytes() + body.tobytes())
    return path


def read_state_binary(path):
    raw = np.frombuffer(Path(path).read_bytes(), dtype='<f8')
    if raw.size < 4:
        raise StateFormatError('binary state is shorter than its header')
    D, N, L, time_tag = raw[:4]
    if D != int(D) or N != int(N):
        raise StateFormatError(f'header D={D} N={N} must be integers')
    try:
        grid = Grid(int(D), int(N), float(L))
    except GridError as e:
        raise StateFormatError(f'Header: {e.message}')
    body = raw[4:]
    if body.size != 2 * grid.size:
        raise StateFormatError(f'expected {2 * grid.size} values after the header, found {body.size}')
    return State(grid, body[0::2] + 1j * body[1::2], float(time_tag))


# ==================== REPORTS ====================

def ensure_directory(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_report(report, directory, name='report.json'):
    """JSON with sorted keys; generated_at is the only clock-dependent field."""
    directory = ensure_directory(directory)
    payload = _plain(dict(report))
    payload['generated_at'] = datetime.now(timezone.utc).isoformat(timespec='seconds')
    path = directory / name
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n')
    logger.info('wrote %s', path)
    return path


def write_series(frame, directory, name='series.csv'):
    directory = ensure_directory(directory)
    path = directory / name
    frame.to_csv(path, index=False, float_format='%.12g')
    logger.info('wrote %s (%d rows)', path, len(frame))
    return path


def write_snapshot(state, directory, step):
    return write_state_csv(state, ensure_directory(directory) / f'state_{step}.csv')

"""
파일 저장 유틸리티
JSON/CSV 결과물을 임시 파일에 쓴 뒤 이름을 바꿔 원자적으로 저장
"""

import csv
import json
import os
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import pytz


TIMEZONE = "Asia/Seoul"


def now_iso() -> str:
    """기록용 현재 시각 (시간대 포함 ISO 8601)"""
    return datetime.now(pytz.timezone(TIMEZONE)).isoformat()


def format_float(value: float) -> str:
    """64비트 실수를 17자리 유효숫자로 (재읽기 시 비트 단위로 동일)"""
    return format(float(value), ".17g")


def _write_atomic(filepath: Path, write) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(prefix=f".{filepath.name}.", dir=filepath.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            write(f)
        os.replace(temp_name, filepath)
    except BaseException:
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise
    return filepath


def save_to_json(data: Dict[str, Any], filepath) -> Path:
    """JSON 파일로 저장"""
    path = _write_atomic(filepath, lambda f: json.dump(data, f, ensure_ascii=False, indent=2))
    print(f"Data saved to: {path}")
    return path


def load_json(filepath) -> Dict[str, Any]:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def save_to_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], filepath) -> Path:
    """CSV 파일로 저장 (실수는 17자리 유효숫자)"""
    def write(f):
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])

    path = _write_atomic(filepath, write)
    print(f"Data saved to: {path}")
    return path


def read_csv(filepath) -> List[Dict[str, str]]:
    with open(filepath, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))

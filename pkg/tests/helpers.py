"""Fixture writers shared by the test modules"""
import json

from PIL import Image


def write_lines(path, records):
    """JSONL writer; strings are written verbatim so tests can plant malformed lines"""
    with open(path, 'w', encoding='utf-8') as file:
        for record in records:
            file.write((record if isinstance(record, str) else json.dumps(record)) + "\n")
    return path


def solid_image(size, color):
    return Image.new('RGB', size, color)

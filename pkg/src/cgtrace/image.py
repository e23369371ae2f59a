"""Flat program images and the HXCI container format.

Layout of an ``.hxci`` file (all integers little-endian)::

    magic "HXCI" | version u16 | entry u32 | section count u16
    per section: base u32 | length u32 | kind u8 (0 = code, 1 = data)
    raw section bytes, in table order
"""

import struct
from dataclasses import dataclass, field

from .isa import MASK32, ZERO_PAGE_END

MAGIC = b"HXCI"
VERSION = 1
KIND_CODE = 0
KIND_DATA = 1

_HEADER = struct.Struct("<4sHIH")
_SECTION = struct.Struct("<IIB")


class ImageFormatError(ValueError):
    """Malformed image; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        where = f" (offset {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.offset = offset


class PatchRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    entry: int
    code_base: int
    code: bytes
    data_base: int = 0
    data: bytes = b""
    version: int = VERSION
    magic: bytes = field(default=MAGIC, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "code", bytes(self.code))
        object.__setattr__(self, "data", bytes(self.data))
        check_image(self)

    @property
    def code_end(self):
        return self.code_base + len(self.code)

    @property
    def data_end(self):
        return self.data_base + len(self.data)

    def in_code(self, addr, n=1):
        return self.code_base <= addr and addr + n <= self.code_end

    def read_code(self, addr, n):
        off = addr - self.code_base
        return self.code[off:off + n]

    def replace_code(self, code):
        return Image(self.entry, self.code_base, code, self.data_base, self.data, self.version)


def check_image(img, offset=None):
    if img.entry < ZERO_PAGE_END:
        raise ImageFormatError("entry in unmapped page", offset)
    if img.code_base < ZERO_PAGE_END:
        raise ImageFormatError("code section in unmapped page", offset)
    if not img.code:
        raise ImageFormatError("empty code section", offset)
    if img.code_end - 1 > MASK32 or img.data_end - 1 > MASK32:
        raise ImageFormatError("section exceeds 32-bit address space", offset)
    if img.data:
        if img.data_base < ZERO_PAGE_END:
            raise ImageFormatError("data section in unmapped page", offset)
        if img.data_base < img.code_end and img.code_base < img.data_end:
            raise ImageFormatError("overlapping sections", offset)
    if not img.in_code(img.entry):
        raise ImageFormatError("entry outside code", offset)


def serialize(img):
    sections = [(img.code_base, img.code, KIND_CODE)]
    if img.data:
        sections.append((img.data_base, img.data, KIND_DATA))
    out = bytearray(_HEADER.pack(MAGIC, img.version, img.entry, len(sections)))
    for base, blob, kind in sections:
        out += _SECTION.pack(base, len(blob), kind)
    for _, blob, _ in sections:
        out += blob
    return bytes(out)


def load_image(raw):
    raw = bytes(raw)
    if len(raw) < _HEADER.size:
        raise ImageFormatError("truncated header", len(raw))
    magic, version, entry, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ImageFormatError("bad magic", 0)
    if version != VERSION:
        raise ImageFormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    table = []
    for _ in range(count):
        if pos + _SECTION.size > len(raw):
            raise ImageFormatError("truncated section table", pos)
        table.append((pos,) + _SECTION.unpack_from(raw, pos))
        pos += _SECTION.size
    code = data = None
    for entry_off, base, length, kind in table:
        if pos + length > len(raw):
            raise ImageFormatError("truncated section data", pos)
        blob = raw[pos:pos + length]
        if kind == KIND_CODE and code is None:
            code = (base, blob)
        elif kind == KIND_DATA and data is None:
            data = (base, blob)
        else:
            raise ImageFormatError(f"unexpected section kind {kind}", entry_off)
        pos += length
    if pos != len(raw):
        raise ImageFormatError("trailing bytes", pos)
    if code is None:
        raise ImageFormatError("no code section", _HEADER.size)
    data_base, data_bytes = data if data is not None else (0, b"")
    return Image(entry, code[0], code[1], data_base, data_bytes, version)


def apply_patch(img, addr, patch):
    """Write ``patch`` at ``addr`` in the code section; return (new image, overwritten bytes)."""
    patch = bytes(patch)
    if not patch or not img.in_code(addr, len(patch)):
        raise PatchRangeError(f"patch [{addr:#x}, {addr + len(patch):#x}) outside code")
    off = addr - img.code_base
    original = img.code[off:off + len(patch)]
    code = img.code[:off] + patch + img.code[off + len(patch):]
    return img.replace_code(code), original

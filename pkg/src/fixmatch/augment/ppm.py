"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

import numpy as np


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos


def read_pnm(path):
    """Return an ``(H, W, C)`` uint8 array with C = 1 (P5) or 3 (P6)."""
    with open(path, "rb") as f:
        buf = f.read()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    c = 1 if magic == b"P5" else 3
    w, h = int(w), int(h)
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape(h, w, c).copy()


def write_pnm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())

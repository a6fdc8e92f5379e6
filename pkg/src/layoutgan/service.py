"""HTTP inference service over a frozen checkpoint.

A small threaded JSON-over-HTTP server exposing synthesis to interactive
clients. Requests carry a layout document (the same format the CLI reads),
optionally with explicit style seeds; responses return base64 PNGs for the
image, the category label map, and every instance's soft mask, plus the
effective seeds, so a client can resample exactly one instance by echoing
the other seeds back. The model is read-only, so concurrent requests need
no locking and identical requests produce identical responses.
"""

from __future__ import annotations

import base64
import io
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image

from .evaluation import category_palette, label_map_to_rgb
from .layouts import (Layout, LayoutError, StyleSpec, sample_styles,
                      with_background)
from .networks import Generator

__all__ = ["synthesize", "encode_png", "make_server", "serve"]


def encode_png(array: np.ndarray, mode: str) -> bytes:
    """Deterministic PNG bytes for a uint8 array ("RGB" or "L")."""
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _to_u8_image(img: np.ndarray) -> np.ndarray:
    """(3, R, R) floats in [-1, 1] -> (R, R, 3) uint8, linear map."""
    u8 = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.transpose(u8, (1, 2, 0))


def _to_u8_mask(mask: np.ndarray) -> np.ndarray:
    return np.clip(np.round(mask * 255.0), 0, 255).astype(np.uint8)


def synthesize(gen: Generator, layout: Layout,
               style: Optional[StyleSpec] = None,
               default_seed: int = 0) -> Dict[str, object]:
    """Run the generator on a layout; returns arrays plus effective seeds.

    The result dict holds ``image`` (R, R, 3) uint8, ``label_map`` int64,
    ``label_map_rgb`` uint8, ``masks`` list of (R, R) uint8 soft masks
    (background first), the instance ``labels`` as names, and the seeds
    that actually produced the style codes.
    """
    R = gen.config.resolution
    if layout.lattice != (R, R):
        raise LayoutError(
            f"layout lattice {layout.lattice[0]}x{layout.lattice[1]} does "
            f"not match the model resolution {R}x{R}")
    inst = with_background(layout)
    codes = sample_styles(inst, gen.config.d_img, gen.config.d_obj,
                          seed=default_seed, style=style)
    out = gen.forward(inst, codes)
    stack = np.asarray(out.masks.values.data)
    names = [layout.categories.names[b.label] for b in inst.instances]
    return {
        "image": _to_u8_image(np.asarray(out.image.data)),
        "label_map": out.argmax_map,
        "label_map_rgb": label_map_to_rgb(out.argmax_map,
                                          layout.categories.d_ell),
        "masks": [_to_u8_mask(stack[i]) for i in range(stack.shape[0])],
        "labels": names,
        "image_seed": codes.image_seed,
        "object_seeds": list(codes.object_seeds),
    }


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class _Handler(BaseHTTPRequestHandler):
    server_version = "layoutgan"

    def log_message(self, fmt, *args):
        pass

    def _reply(self, status: int, payload: Dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        gen = self.server.gen
        if self.path == "/health":
            self._reply(200, {"status": "ok",
                              "resolution": gen.config.resolution,
                              "step": self.server.model_step})
            return
        if self.path == "/categories":
            cats = gen.config.categories
            self._reply(200, {
                "name": cats.name,
                "categories": list(cats.names),
                "background_index": cats.background_index,
                "palette": category_palette(cats.d_ell).tolist(),
            })
            return
        self._reply(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        if self.path != "/synthesize":
            self._reply(404, {"error": f"no route {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            from .layouts import parse_layout
            try:
                layout, style = parse_layout(raw.decode("utf-8"))
            except LayoutError as e:
                self._reply(400, {"error": "invalid layout",
                                  "violations": str(e).split("; ")})
                return
            gen = self.server.gen
            R = gen.config.resolution
            if layout.lattice != (R, R):
                self._reply(422, {
                    "error": f"layout lattice "
                             f"{layout.lattice[0]}x{layout.lattice[1]} does "
                             f"not match the model resolution {R}x{R}"})
                return
            result = synthesize(gen, layout, style,
                                default_seed=self.server.default_seed)
            self._reply(200, {
                "image_png": _b64(encode_png(result["image"], "RGB")),
                "label_map_png": _b64(
                    encode_png(result["label_map_rgb"], "RGB")),
                "masks_png": [_b64(encode_png(m, "L"))
                              for m in result["masks"]],
                "labels": result["labels"],
                "image_seed": result["image_seed"],
                "object_seeds": result["object_seeds"],
                "resolution": R,
            })
        except Exception as e:  # noqa: BLE001 - fault barrier
            self._reply(500, {"error": f"{type(e).__name__}: {e}"})


def make_server(gen: Generator, port: int = 0, model_step: int = 0,
                default_seed: int = 0) -> ThreadingHTTPServer:
    """Bind a server on ``port`` (0 picks a free one); caller runs it."""
    server = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
    server.gen = gen
    server.model_step = model_step
    server.default_seed = default_seed
    return server


def serve(gen: Generator, port: int, model_step: int = 0) -> None:
    server = make_server(gen, port, model_step)
    try:
        server.serve_forever()
    finally:
        server.server_close()

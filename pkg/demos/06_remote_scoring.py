"""The remote scorer against a live service instance, end to end.

Starts the scoring service in-process (requires the scorer-service package),
extracts tokens for two pictures over HTTP, and scores a same-image pair
against a cross-image pair through the batched client.
"""

import threading
import time

import numpy as np

try:
    import uvicorn
    from scorer_service.app import create_app
    from scorer_service.config import ServiceConfig
except ImportError:
    raise SystemExit("this demo needs the scorer-service package: pip install -e scorer_service")

from tokenrank import RemoteConfig, RemoteScorer
from tokenrank.robustness import Image, RemoteExtractor
from tokenrank.synthetic import toy_image

server = uvicorn.Server(
    uvicorn.Config(create_app(ServiceConfig()), host="127.0.0.1", port=0, log_level="warning")
)
thread = threading.Thread(target=server.run, daemon=True)
thread.start()
while not server.started:
    time.sleep(0.05)
host, port = server.servers[0].sockets[0].getsockname()[:2]
endpoint = f"http://{host}:{port}"
print(f"service up at {endpoint}")

try:
    extractor = RemoteExtractor(endpoint, resolution=280)
    photo_a = Image(np.asarray(toy_image(280, 210, seed=1).pixels))
    photo_b = Image(np.asarray(toy_image(280, 210, seed=9).pixels))
    grid_a = extractor.extract(photo_a)
    grid_b = extractor.extract(photo_b)
    print(f"extracted grids: {grid_a.num_tokens} tokens each, D={grid_a.dim}")

    scorer = RemoteScorer(RemoteConfig(endpoint=endpoint, prompt_id="object", batch_size=8))
    same, cross = scorer.score_batch(grid_a, [grid_a, grid_b])
    print(f"same-image pair : {same:.4f}")
    print(f"cross-image pair: {cross:.4f}")
    print("ordering sane  :", same > cross)
finally:
    server.should_exit = True
    thread.join(timeout=10)

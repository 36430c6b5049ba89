"""Similarity under controlled perturbations, with a negative baseline.

Each query image is paired with transformed versions of itself over a grid of
strength factors; scores come from the offline extractor + pairwise scorer.
The negative baseline is the mean per-query 5th percentile of cross-image
scores, and the crossing point marks the strength at which the transform
makes a true pair look no better than a negative one.
"""

from tokenrank import MockChamferScorer, crossing_point, negative_baseline, robustness_curve
from tokenrank.robustness import PatchStatExtractor
from tokenrank.synthetic import toy_image

images = [toy_image(96, 80, seed=s) for s in range(6)]
extractor = PatchStatExtractor(seed=0)
scorer = MockChamferScorer()

# Negative scores: every query against every other image.
grids = [extractor.extract(img) for img in images]
negatives = {
    str(i): [scorer.score_batch(grids[i], [grids[j]])[0] for j in range(len(images)) if j != i]
    for i in range(len(images))
}
baseline = negative_baseline(negatives)
print(f"negative baseline (mean per-query 5th percentile): {baseline:.4f}\n")

for kind, n in (("occlusion", 11), ("noise", 9), ("blur", 8), ("downscale", 6)):
    curve = robustness_curve(scorer, extractor, images, kind=kind, n=n, seed=3)
    cross = crossing_point(curve, baseline)
    head = ", ".join(f"{f:.2g}:{v:.3f}" for f, v in curve.points[:4])
    where = f"{cross:.3g}" if cross is not None else "never"
    print(f"{kind:<10} crossing at factor {where:<8} curve head: {head} ...")

"""Published full-scale results kept as metadata for comparison.

They come from pretrained CLIP / BioBERT encoders trained on about 95k fundus
images and cannot be reproduced by the toy encoders shipped here. Cells are
``(mean, std)`` F1 x100 over three trial seeds; ``None`` means not reported.
"""

from __future__ import annotations

DOMAINS = ("APTOS", "EyePACS", "Messidor", "Messidor2")

# Leave-one-domain-out F1, columns DOMAINS + Avg.
MULTI_SOURCE_F1 = {
    ("ERM", "ResNet50"): [(28.6, 0.8), (29.3, 0.4), (45.8, 0.9), (51.3, 0.7), (38.8, 0.5)],
    ("ERM", "ViT"): [(24.0, 1.6), (30.9, 1.0), (46.6, 0.3), (53.4, 0.6), (38.7, 0.3)],
    ("Zero-shot", "CLIP"): [(3.4, 0.1), (4.4, 0.0), (4.0, 0.1), (2.2, 0.1), (3.5, 0.0)],
    ("Zero-shot", "CLIP-VB(p)"): [(14.6, 0.0), (18.4, 0.0), (15.9, 0.1), (12.7, 0.1), (15.4, 0.0)],
    ("Zero-shot", "CLIP-VB(s)"): [(11.6, 0.1), (17.9, 0.0), (12.7, 0.1), (14.7, 0.1), (14.2, 0.0)],
    ("Linear probing", "CLIP-V"): [(13.0, 0.2), (14.0, 2.5), (12.4, 0.0), (14.2, 0.6), (13.4, 0.5)],
    ("Naive CLIP", "CLIP"): [(26.0, 1.0), (30.7, 1.0), (47.7, 0.4), (53.2, 0.5), (39.4, 0.7)],
    ("Naive CLIP", "CLIP-VB(p)"): [(26.5, 0.6), (31.6, 0.7), (46.5, 0.5), (53.5, 0.3), (39.5, 0.3)],
    ("CoOpLVT", "CLIP"): [(31.9, 2.6), (32.2, 0.3), (46.2, 0.7), (51.6, 0.3), (40.5, 0.5)],
}

# Single-source F1 means, rows (algorithm, training domain), columns DOMAINS + Avg.
SINGLE_SOURCE_F1 = {
    ("Naive CLIP", "APTOS"): [None, 26.2, 13.4, 22.8, 20.7],
    ("CoOpLVT", "APTOS"): [None, 28.1, 14.5, 25.5, 22.7],
    ("Naive CLIP", "EyePACS"): [42.9, None, 30.1, 44.9, 39.3],
    ("CoOpLVT", "EyePACS"): [40.7, None, 34.9, 48.4, 41.3],
    ("Naive CLIP", "Messidor"): [20.7, 20.3, None, 37.3, 26.1],
    ("CoOpLVT", "Messidor"): [23.6, 22.4, None, 38.9, 28.3],
    ("Naive CLIP", "Messidor2"): [33.9, 29.3, 47.9, None, 37.0],
    ("CoOpLVT", "Messidor2"): [38.4, 29.7, 47.1, None, 38.4],
}

# Zero-shot averages per (text encoder, prompt family): (F1, accuracy), each (mean, std).
ZERO_SHOT_PROMPTS = {
    ("CLIP", "I"): ((1.2, 0.0), (3.1, 0.1)),
    ("CLIP", "II"): ((3.5, 0.0), (4.9, 0.1)),
    ("CLIP-VB(p)", "I"): ((15.4, 0.0), (44.3, 0.1)),
    ("CLIP-VB(p)", "II"): ((8.1, 0.0), (16.4, 0.0)),
    ("CLIP-VB(s)", "I"): ((14.2, 0.0), (47.9, 0.1)),
    ("CLIP-VB(s)", "II"): ((7.9, 0.1), (19.6, 0.1)),
}

DATASET_SIZES = {"EyePACS": 88702, "APTOS": 3657, "Messidor": 1200, "Messidor2": 1744}
LINEAR_PROBE_AVG_ACCURACY = 56.4

TRAINING = {
    "per_domain_batch": 32,
    "total_batch": 96,
    "lr_clip": 5e-6,
    "lr_imagenet": 5e-5,
    "weight_decay": 0.0,
    "optimizer": "AdamW",
    "train_val_split": (80, 20),
    "trial_seeds": 3,
    "image_side": 224,
}


def improvement_over_baseline(baseline=("ERM", "ViT")) -> float:
    """Average-F1 gain of CoOpLVT over ``baseline`` in absolute points.

    The headline +1.8 matches the ERM ViT row; against naive CLIP it is +1.1.
    """
    ours = MULTI_SOURCE_F1[("CoOpLVT", "CLIP")][-1][0]
    return round(ours - MULTI_SOURCE_F1[baseline][-1][0], 1)

"""Default settings for every stage of the recourse pipeline.

Run configs only need to name the values they change; everything else is
taken from the tables below.
"""

# Discretization
DISCRETIZER = {
    "bins_per_numeric": 10,
    "discrete_threshold": 25,  # numeric features with at most this many unique values stay discrete
}

# Classifier f
CLASSIFIER = {
    "hidden": [20, 10],
    "epochs": 100,
    "batch_size": 64,
    "lr": 1e-3,
    "threshold_policy": "fixed",  # "fixed" or "youden"
    "tau": 0.5,
    "validation_fraction": 0.2,
    "alt_seed_offset": 1000,
}

# Class-conditional circuits p+ / p-
CIRCUIT = {
    "min_rows": 200,
    "min_cols": 3,
    "alpha": 0.1,
    "significance": 0.05,
    "n_clusters": 2,
    "n_init": 10,
}

# Accepted-instance pool A
POOL = {
    "target_size": 2000,
    "max_draws": 200000,
    "draw_batch": 2048,
}

# Neighborhood encoder psi / rho
ENCODER = {
    "k": 5,
    "psi_hidden": [16, 16],
    "embed_dim": 8,
    "use_neighborhood": True,
}

# Recourse generator G
GENERATOR = {
    "hidden": [128, 128],
    "epochs": 30,
    "batch_size": 64,
    "steps_per_epoch": 20,
    "lr": 1e-3,
    "neg_grad_clip": 10.0,
    "max_draws": 200000,
}

# Loss weights and per-term switches
LOSS_WEIGHTS = {
    "lambda_val": 1.0,
    "lambda_ppt": 1.0,
    "alpha": 0.5,
    "lambda_pos": 1.0,
    "lambda_neg": 0.1,
    "lambda_sparse": 0.1,
    "lambda_ent": 0.05,
    "budget": 4.0,
    "proximity": True,
    "plaus_pos": True,
    "plaus_neg": True,
    "sparsity": True,
    "validity": True,
    "entropy": True,
    "ppt_block": True,
}

# Local search
REFINE = {
    "enabled": True,
    "delta_max": None,
}

# Evaluation
EVALUATION = {
    "folds": 5,
    "max_denied": 500,
    "logit_change_threshold": 0.5,
}

# Loss-term toggle rows for the ablation runner; omitted switches stay enabled.
ABLATION_MATRIX = [
    {"name": "full"},
    {"name": "no_proximity", "proximity": False},
    {"name": "no_plausibility", "plaus_pos": False, "plaus_neg": False},
    {"name": "pos_plausibility_only", "proximity": False, "plaus_neg": False},
    {"name": "no_sparsity", "sparsity": False},
    {"name": "no_validity", "validity": False},
    {"name": "no_entropy", "entropy": False},
    {"name": "no_ppt_block", "ppt_block": False},
    {"name": "no_plausibility_no_validity", "plaus_pos": False, "plaus_neg": False, "validity": False},
    {"name": "validity_only", "proximity": False, "plaus_pos": False, "plaus_neg": False,
     "sparsity": False, "entropy": False},
    {"name": "validity_plus_pos", "proximity": False, "plaus_neg": False,
     "sparsity": False, "entropy": False},
]

SECTIONS = {
    "discretizer": DISCRETIZER,
    "classifier": CLASSIFIER,
    "circuit": CIRCUIT,
    "pool": POOL,
    "encoder": ENCODER,
    "generator": GENERATOR,
    "loss": LOSS_WEIGHTS,
    "refine": REFINE,
    "evaluation": EVALUATION,
}

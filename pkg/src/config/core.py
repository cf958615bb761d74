VERBOSE = True

# Demand levels
N_CLASSES = 4
LEVEL_NAMES = ("non", "low", "med", "high")
LEVEL_THRESHOLDS = (0, 2, 5)  # non <= 0 < low <= 2 < med <= 5 < high

# Virtual grid
GRID_ORIGIN_LAT = 35.0
GRID_ORIGIN_LON = 139.0
GRID_CELL_SIZE_KM = 1.0
GRID_N_ROWS = 20
GRID_N_COLS = 20
SLOT_DURATION_SECONDS = 3600
EPOCH_START = 1672531200  # 2023-01-01T00:00:00Z
UTC_OFFSET_HOURS = 9.0
KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON_EQUATOR = 111.320

# Ingest
LOCATE_WINDOW_SECONDS = 45.0
DEMAND_EVENTS = "pickups"  # pickups | both
SAMPLE_ENUMERATION = "dense"  # dense | sparse

# Model
LAYER_WIDTHS = (6, 64, 64, 64, 4)
N_FEATURES = 6
LEARNING_RATE = 5e-3  # demand model
ADAM_LEARNING_RATE = 1e-3  # AdamHyper default
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
SGD_LEARNING_RATE = 0.05
PROBABILITY_FLOOR = 1e-12
MINI_BATCH_SIZE = 32  # sets no larger than this train full-batch

# Federated training
N_ROUNDS = 300
LOCAL_EPOCHS = 1
CLIENT_FRACTION = 1.0
PATIENCE = 30
OVERLAP_MARGIN = 0
LOCAL_OPTIMIZER = "adam"  # adam | sgd
EARLY_STOP_TOLERANCE = 1e-9
POOLED_CLIENT_ID = "pooled"

# Evaluation
SPLIT_RATIOS = (0.64, 0.16, 0.20)
STRATIFY = False

# Synthetic corpus
N_FACILITIES = 16
SYNTHETIC_DAYS = 30
HOTSPOT_PEAKS = (1.2,)  # trips per hour at each hotspot center, day profile
VEHICLES_PER_FACILITY = 12
BASE_RATE = 0.0
HOTSPOT_SIGMA_KM = 0.4
HOTSPOT_RADIUS_CELLS = 0  # Chebyshev reach of a hotspot; 0 = its own cell only
RUSH_HOURS = (7, 8, 9, 17, 18, 19)
RUSH_MULTIPLIER = 3.0
NIGHT_HOURS = (0, 1, 2, 3, 4, 5)
NIGHT_MULTIPLIER = 0.1
EVENING_MULTIPLIER = 0.5
WEEKEND_MULTIPLIER = 0.7
GAP_FRACTION = 0.1
FIX_CADENCE_SECONDS = 5.0
FIXES_PER_SIDE = 3

# Sweep
SWEEP_FACILITIES = (4, 8, 16)
SWEEP_PATIENCE = (10, 30, None)  # None = never stop
SWEEP_MARGINS = (0,)
SWEEP_SEEDS = 3

MASTER_SEED = 0
OUTPUT_DIR = "out/run"

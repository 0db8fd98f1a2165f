import os

# 输出目录
OUTPUT_DIR = "output"

# 日志目录（错误报告）
LOG_DIR = os.path.join(OUTPUT_DIR, "logs")

# 检查点目录名（位于每次运行的输出目录下）
CHECKPOINT_DIRNAME = "checkpoints"

# 默认数据文件
CORPUS_PATH = os.path.join("data", "corpus.txt")
VOCAB_PATH = os.path.join("data", "vocab.txt")

# 对抗混合与损失
DISC_LOSS_WEIGHT = 50.0  # λ
GUMBEL_TAU = 0.3
MASK_RATIO = 0.15
HEAD_DEPTHS = [2, 3, 4]
LAYER_SWITCH_POINTS = [1 / 3, 2 / 3]
ADV_MLM_MULTIPLIER = 0.1
STOP_GRAD = True  # 各头所在层之后截断主干梯度；False 为不截断的对照

# 优化器
PEAK_LR = 5e-4
WARMUP_STEPS = 1000
TOTAL_STEPS = 20000
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-6
CLIP_NORM = 2.0
MAX_NONFINITE_STEPS = 3

# 桌面规模模型
BATCH_SIZE = 32
SEQ_LEN = 64
HIDDEN_SIZE = 128
NUM_ATTENTION_HEADS = 4
FFN_SIZE = 256
DISC_LAYERS = 6
NUM_BUCKETS = 16
MAX_RELATIVE_DISTANCE = 64
DROPOUT = 0.1

# 合成语料
CORPUS_SIZE = 20000
MIN_LENGTH = 32
MAX_LENGTH = 64
LABEL_PRIOR = 0.5
DATA_SEED = 7

# 记录
LOG_INTERVAL = 10
CHECKPOINT_INTERVAL = 1000

# 线性探针
PROBE_STEPS = 2000
PROBE_LR = 1e-2
PROBE_SEQUENCES = 1000

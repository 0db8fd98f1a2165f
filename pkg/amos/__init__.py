"""
AMOS：多头 MLM 生成器 + 对抗混合课程的 ELECTRA 式预训练（桌面规模）
"""

__version__ = "0.1.0"

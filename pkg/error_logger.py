#!/usr/bin/env python3
"""
错误日志系统
训练/探针/导出失败时生成详细的、结构化的错误报告（文本 + JSON）
"""

import os
import sys
import traceback
import platform
import datetime
import json
from typing import Dict, Any, Optional
from dataclasses import dataclass, asdict
import hashlib


@dataclass
class SystemInfo:
    """系统信息数据类"""
    os_name: str
    os_version: str
    python_version: str
    cpu_count: int
    disk_free: Optional[str]
    numpy_version: str
    pil_version: str
    tqdm_version: str


@dataclass
class ErrorLog:
    """错误日志数据类"""
    # 基本信息
    timestamp: str
    log_id: str

    # 运行信息
    stage: str
    step: Optional[int]
    config_path: Optional[str]
    config_hash: Optional[str]

    # 错误信息
    error_type: str
    error_code: str
    error_message: str
    traceback: str

    # 训练参数
    run_params: Dict[str, Any]

    # 系统信息
    system_info: SystemInfo

    # 执行信息
    elapsed_time: Optional[float]


def _version(module_name: str) -> str:
    try:
        module = __import__(module_name)
        return getattr(module, "__version__", "Unknown")
    except Exception:
        return "Unknown"


class ErrorLogger:
    """错误日志记录器"""

    @staticmethod
    def get_system_info() -> SystemInfo:
        """获取系统信息"""
        disk_free = None
        try:
            statvfs = os.statvfs('/')
            free_bytes = statvfs.f_frsize * statvfs.f_avail
            disk_free = f"{free_bytes / (1024**3):.1f} GB"
        except Exception:
            pass

        return SystemInfo(
            os_name=platform.system(),
            os_version=platform.version(),
            python_version=sys.version,
            cpu_count=os.cpu_count() or 0,
            disk_free=disk_free,
            numpy_version=_version("numpy"),
            pil_version=_version("PIL"),
            tqdm_version=_version("tqdm"),
        )

    @staticmethod
    def get_file_hash(file_path: str) -> Optional[str]:
        """配置文件 sha256（前16位）"""
        try:
            with open(file_path, 'rb') as f:
                return hashlib.sha256(f.read()).hexdigest()[:16]
        except Exception:
            return None

    @classmethod
    def create_error_log(cls,
                         error: BaseException,
                         stage: str,
                         run_params: Dict[str, Any],
                         step: Optional[int] = None,
                         config_path: Optional[str] = None,
                         elapsed_time: Optional[float] = None) -> ErrorLog:
        """创建详细的错误日志"""
        timestamp = datetime.datetime.now()
        log_id = f"{timestamp.strftime('%Y%m%d_%H%M%S')}_{os.getpid()}"

        tb_str = ''.join(traceback.format_exception(
            type(error), error, error.__traceback__
        ))

        return ErrorLog(
            timestamp=timestamp.isoformat(),
            log_id=log_id,
            stage=stage,
            step=step,
            config_path=config_path,
            config_hash=cls.get_file_hash(config_path) if config_path else None,
            error_type=type(error).__name__,
            error_code=getattr(error, "code", "internal"),
            error_message=str(error),
            traceback=tb_str,
            run_params=run_params,
            system_info=cls.get_system_info(),
            elapsed_time=elapsed_time,
        )

    @staticmethod
    def format_log_for_display(log: ErrorLog) -> str:
        """格式化日志用于显示"""
        output = []
        output.append("=" * 70)
        output.append(f"错误报告 - {log.timestamp}")
        output.append(f"日志ID: {log.log_id}")
        output.append("=" * 70)

        output.append("\n【运行信息】")
        output.append(f"阶段: {log.stage}")
        if log.step is not None:
            output.append(f"步数: {log.step}")
        if log.config_path:
            output.append(f"配置: {log.config_path}")
        if log.config_hash:
            output.append(f"哈希: {log.config_hash}")

        output.append("\n【错误信息】")
        output.append(f"类型: {log.error_type}")
        output.append(f"代码: {log.error_code}")
        output.append(f"消息: {log.error_message}")

        output.append("\n【训练参数】")
        for key, value in log.run_params.items():
            output.append(f"{key}: {value}")

        if log.elapsed_time:
            output.append("\n【执行信息】")
            output.append(f"耗时: {log.elapsed_time:.1f} 秒")

        output.append("\n【系统环境】")
        output.append(f"操作系统: {log.system_info.os_name} {log.system_info.os_version[:50]}...")
        output.append(f"Python: {log.system_info.python_version.split()[0]}")
        output.append(f"CPU核心: {log.system_info.cpu_count}")
        if log.system_info.disk_free:
            output.append(f"磁盘剩余: {log.system_info.disk_free}")

        output.append("\n【依赖版本】")
        output.append(f"numpy: {log.system_info.numpy_version}")
        output.append(f"Pillow: {log.system_info.pil_version}")
        output.append(f"tqdm: {log.system_info.tqdm_version}")

        output.append("\n【调用栈追踪】")
        output.append(log.traceback)

        output.append("=" * 70)
        output.append("报告结束")
        output.append("=" * 70)

        return '\n'.join(output)

    @staticmethod
    def save_to_file(log: ErrorLog, directory: str = "logs") -> str:
        """保存日志到文件"""
        os.makedirs(directory, exist_ok=True)

        filepath = os.path.join(directory, f"error_{log.log_id}.log")
        with open(filepath, 'w', encoding='utf-8') as f:
            f.write(ErrorLogger.format_log_for_display(log))

        # JSON 版本便于程序分析
        json_filepath = filepath[:-len('.log')] + '.json'
        with open(json_filepath, 'w', encoding='utf-8') as f:
            json.dump(asdict(log), f, indent=2, ensure_ascii=False, default=str)

        return filepath

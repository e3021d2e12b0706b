"""
Prometheus metrics for memory updates, remote adapters and benchmark episodes.
"""

import time
from typing import Optional

import psutil
from prometheus_client import (
    CONTENT_TYPE_LATEST,
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
)


class NavigationMetrics:
    """Counters and histograms kept in a private registry."""

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()
        self.start_time = time.time()

        # Episodes
        self.episodes_total = Counter(
            'spatialnav_episodes_total',
            'Total number of evaluated episodes',
            ['task', 'status'],
            registry=self.registry
        )

        self.episode_duration_seconds = Histogram(
            'spatialnav_episode_duration_seconds',
            'Wall-clock time per episode',
            ['task'],
            buckets=[0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0],
            registry=self.registry
        )

        self.candidate_visits_total = Counter(
            'spatialnav_candidate_visits_total',
            'Candidate goals visited during navigation',
            registry=self.registry
        )

        # Memories
        self.memory_updates_total = Counter(
            'spatialnav_memory_updates_total',
            'Memory update attempts by outcome',
            ['memory', 'result'],
            registry=self.registry
        )

        # Remote adapters
        self.adapter_requests_total = Counter(
            'spatialnav_adapter_requests_total',
            'Remote adapter requests',
            ['role', 'status'],
            registry=self.registry
        )

        self.adapter_latency_seconds = Histogram(
            'spatialnav_adapter_latency_seconds',
            'Remote adapter round-trip latency',
            ['role'],
            buckets=[0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0],
            registry=self.registry
        )

        # Errors
        self.errors_total = Counter(
            'spatialnav_errors_total',
            'Errors recorded without aborting the surrounding batch',
            ['error_type', 'operation'],
            registry=self.registry
        )

        self.memory_used_bytes = Gauge(
            'spatialnav_process_memory_used_bytes',
            'Resident set size of the process',
            registry=self.registry
        )

        self.uptime_seconds = Gauge(
            'spatialnav_uptime_seconds',
            'Seconds since the metrics object was created',
            registry=self.registry
        )

    def record_episode(self, task: str, success: bool, duration_seconds: float):
        status = "success" if success else "failure"
        self.episodes_total.labels(task=task, status=status).inc()
        self.episode_duration_seconds.labels(task=task).observe(duration_seconds)

    def record_candidate_visit(self):
        self.candidate_visits_total.inc()

    def record_memory_update(self, memory: str, result: str, count: int = 1):
        """memory is 'landmark' or 'cognitive'; result e.g. 'inserted', 'fused', 'rejected'."""
        if count:
            self.memory_updates_total.labels(memory=memory, result=result).inc(count)

    def record_adapter_request(self, role: str, status: str, duration_seconds: float):
        self.adapter_requests_total.labels(role=role, status=status).inc()
        self.adapter_latency_seconds.labels(role=role).observe(duration_seconds)

    def record_error(self, error_type: str, operation: str):
        self.errors_total.labels(error_type=error_type, operation=operation).inc()

    def sample_process(self) -> int:
        """Refresh the process gauges and return the current RSS in bytes."""
        rss = psutil.Process().memory_info().rss
        self.memory_used_bytes.set(rss)
        self.uptime_seconds.set(time.time() - self.start_time)
        return rss

    def get_metrics(self) -> str:
        """Registry contents in Prometheus text exposition format."""
        return generate_latest(self.registry).decode('utf-8')

    def get_content_type(self) -> str:
        return CONTENT_TYPE_LATEST


# Global metrics instance
navigation_metrics = NavigationMetrics()

"""
Profiling benchmarks for grbLMM
Run manually: python test_profiling.py
"""

import cProfile
import io
import pstats
import sys
import time
import warnings

import numpy as np

from baselearners import FixedBaselearnerSet
from boost_engine import BoostConfig, BoostContext, boost_path, initial_fit, iterate
from simulation import clustered_data
from stopping import HatTracker, make_cv_plan, cv_risk


class ProfilerTimer:
    """Context manager for timing code blocks"""

    def __init__(self, name):
        self.name = name
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, *args):
        elapsed = time.perf_counter() - (self.start_time or 0)
        print(f"{self.name}: {elapsed*1000:.3f}ms")


def benchmark_fixed_selection():
    """Step 1 selection over all p learners"""
    print("\n=== Fixed Baselearner Selection ===")
    rng = np.random.default_rng(0)
    for p in [10, 100, 500]:
        X = rng.standard_normal((500, p))
        learners = FixedBaselearnerSet(X)
        u = rng.standard_normal(500)
        with ProfilerTimer(f"select (N=500, p={p}, 1000 calls)"):
            for _ in range(1000):
                learners.select(u)


def benchmark_random_learner():
    """Refactoring and solving the block ridge system"""
    print("\n=== Random Baselearner ===")
    for n, z_terms in [(50, ("intercept",)), (50, ("intercept", 1, 2)), (500, ("intercept", 1, 2))]:
        data = clustered_data(n=n, n_i=10, p=5, z_terms=z_terms)
        context = BoostContext.build(data, BoostConfig(stopping="none"))
        u = data.y - data.y.mean()
        q = len(z_terms)
        with ProfilerTimer(f"refresh (n={n}, q={q}, 100 calls)"):
            for k in range(100):
                context.random.refresh(0.5 + k * 1e-3, np.eye(q))
        with ProfilerTimer(f"fit (n={n}, q={q}, 1000 calls)"):
            for _ in range(1000):
                context.random.fit(u, 0.5, np.eye(q))


def benchmark_iterations():
    """Cost of one boosting iteration as N and p grow"""
    print("\n=== Boosting Iterations ===")
    for n, p in [(50, 10), (50, 100), (200, 100), (200, 500)]:
        data = clustered_data(n=n, n_i=10, p=p)
        context = BoostContext.build(data, BoostConfig(stopping="none"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = initial_fit(context.bundle, data, context)
            with ProfilerTimer(f"iterate (N={data.N}, p={p}, 100 iterations)"):
                for _ in range(100):
                    state, _, _, _ = iterate(context, state)


def benchmark_stopping():
    """AIC hat tracking against k-fold cross-validation"""
    print("\n=== Stopping Rules ===")
    data = clustered_data(n=50, n_i=10, p=25)
    config = BoostConfig(stopping="none", m_stop=100)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with ProfilerTimer("path without stopping (m_stop=100)"):
            boost_path(data, config)
        with ProfilerTimer("path with hat tracking (N=500, m_stop=100)"):
            boost_path(data, config, hat_tracker=HatTracker())
        plan = make_cv_plan(data, 10, seed=0)
        with ProfilerTimer("10-fold cv risk (m_stop=100)"):
            cv_risk(data, config, plan)


def cprofile_fit():
    """Profile a full path with cProfile"""
    print("\n=== cProfile: Boosting Path ===")
    data = clustered_data(n=100, n_i=10, p=50, z_terms=("intercept", 1))
    config = BoostConfig(stopping="none", m_stop=300)

    profiler = cProfile.Profile()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        profiler.enable()
        boost_path(data, config)
        profiler.disable()

    s = io.StringIO()
    ps = pstats.Stats(profiler, stream=s).sort_stats("cumulative")
    ps.print_stats(25)
    print(s.getvalue())


def benchmark_memory_usage():
    """Size of the recorded trace"""
    print("\n=== Memory Usage Estimates ===")
    data = clustered_data(n=100, n_i=10, p=50)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for every in [1, 10, 100]:
            trace, _, _ = boost_path(data, BoostConfig(stopping="none", m_stop=300, gamma_every=every))
            stored = sum(s.gamma.nbytes + s.eta_beta.nbytes + s.eta_gamma.nbytes for s in trace.checkpoints.values())
            print(f"gamma_every={every:3d}: {len(trace.checkpoints)} checkpoints, ~{stored} bytes, "
                  f"beta path ~{sys.getsizeof(trace.beta_rows) + trace.beta_path.nbytes} bytes")


def run_all_benchmarks():
    """Run all benchmark tests"""
    print("=" * 60)
    print("GRBLMM - PROFILING BENCHMARKS")
    print("=" * 60)

    benchmark_fixed_selection()
    benchmark_random_learner()
    benchmark_iterations()
    benchmark_stopping()
    cprofile_fit()
    benchmark_memory_usage()

    print("\n" + "=" * 60)
    print("BENCHMARKS COMPLETE")
    print("=" * 60)


if __name__ == "__main__":
    run_all_benchmarks()

//! Operation counters used to check the complexity accounting of the
//! fusion layers (SSM timesteps, sparse active sites).

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct Counters {
    ssm_forward_steps: AtomicU64,
    ssm_backward_steps: AtomicU64,
    sparse_input_sites: AtomicU64,
    sparse_output_sites: AtomicU64,
    dense_conv_sites: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub ssm_forward_steps: u64,
    pub ssm_backward_steps: u64,
    pub sparse_input_sites: u64,
    pub sparse_output_sites: u64,
    pub dense_conv_sites: u64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_ssm_steps(&self, forward: u64, backward: u64) {
        self.ssm_forward_steps.fetch_add(forward, Ordering::Relaxed);
        self.ssm_backward_steps.fetch_add(backward, Ordering::Relaxed);
    }

    pub fn add_sparse_sites(&self, inputs: u64, outputs: u64) {
        self.sparse_input_sites.fetch_add(inputs, Ordering::Relaxed);
        self.sparse_output_sites.fetch_add(outputs, Ordering::Relaxed);
    }

    pub fn add_dense_sites(&self, sites: u64) {
        self.dense_conv_sites.fetch_add(sites, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            ssm_forward_steps: self.ssm_forward_steps.load(Ordering::Relaxed),
            ssm_backward_steps: self.ssm_backward_steps.load(Ordering::Relaxed),
            sparse_input_sites: self.sparse_input_sites.load(Ordering::Relaxed),
            sparse_output_sites: self.sparse_output_sites.load(Ordering::Relaxed),
            dense_conv_sites: self.dense_conv_sites.load(Ordering::Relaxed),
        }
    }
}

use std::fmt;

/// Operation families tracked by [`FlopCounter`].
///
/// Convention: one multiply-add is 2 FLOPs; softmax, normalization and
/// activation functions cost 5 FLOPs per element; other pointwise arithmetic
/// and reductions cost 1 per element; data movement is free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Pointwise,
    Softmax,
    Norm,
    Activation,
    Reduce,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::MatMul,
        OpKind::Pointwise,
        OpKind::Softmax,
        OpKind::Norm,
        OpKind::Activation,
        OpKind::Reduce,
    ];

    pub const NONLINEAR_COST: u64 = 5;

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Pointwise => "pointwise",
            OpKind::Softmax => "softmax",
            OpKind::Norm => "norm",
            OpKind::Activation => "activation",
            OpKind::Reduce => "reduce",
        }
    }
}

/// Forward-pass FLOPs accumulated per [`OpKind`]. Only grows until reset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 6],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: OpKind, flops: u64) {
        self.counts[kind.slot()] += flops;
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts[kind.slot()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts = [0; 6];
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

impl fmt::Display for FlopCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for kind in OpKind::ALL {
            write!(f, "{}={} ", kind.name(), self.get(kind))?;
        }
        write!(f, "total={}", self.total())
    }
}

use crate::tensor::Tensor;

/// One training step as seen by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct TapEntry {
    pub step: u64,
    /// Activations crossing the first cut.
    pub smashed: Tensor,
    /// Present only when the topology ships labels to the server.
    pub labels: Option<Vec<u8>>,
    /// Gradient at the first cut (returned by the server, or received by it
    /// when the server holds the data).
    pub gradient: Tensor,
    /// What the server sent into a client tail (ServerData, ClientLabels).
    pub tail_input: Option<Tensor>,
}

/// Append-only record of what an honest-but-curious server legitimately sees.
/// Recording copies values and never touches protocol messages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServerTap {
    entries: Vec<TapEntry>,
}

impl ServerTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: TapEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TapEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

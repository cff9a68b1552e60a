/// Which intermediate activations a forward pass should keep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureSpec {
    /// Concatenated per-head attention outputs, before `W^O`.
    pub heads: bool,
    /// MLP activations before and after the nonlinearity.
    pub neurons: bool,
    /// Every LayerNorm output.
    pub norms: bool,
    /// Residual-stream inputs of every block plus the final residual state.
    pub blocks: bool,
    /// Query/key/value states (after rotary encoding for queries and keys).
    pub qkv: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            heads: true,
            neurons: true,
            norms: true,
            blocks: true,
            qkv: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerRecord<V> {
    pub head_out: Option<V>,
    pub mlp_pre: Option<V>,
    pub mlp_post: Option<V>,
    pub ln1_out: Option<V>,
    pub ln2_out: Option<V>,
    pub q: Option<V>,
    pub k: Option<V>,
    pub v: Option<V>,
}

impl<V> Default for LayerRecord<V> {
    fn default() -> Self {
        Self {
            head_out: None,
            mlp_pre: None,
            mlp_post: None,
            ln1_out: None,
            ln2_out: None,
            q: None,
            k: None,
            v: None,
        }
    }
}

/// Activations captured during one forward pass. Rows of every tensor are
/// `(sample, position)` pairs.
#[derive(Debug, Clone)]
pub struct ActivationRecord<V> {
    pub batch: usize,
    pub seq: usize,
    pub layers: Vec<LayerRecord<V>>,
    /// `X_0 ..= X_L`: the input of block `i` is `block_inputs[i]`, and
    /// `block_inputs[L]` is the residual state entering the final norm.
    pub block_inputs: Vec<V>,
    pub final_norm_out: Option<V>,
}

impl<V> ActivationRecord<V> {
    /// Post-LayerNorm view of block `i`'s output: the next block's first norm,
    /// or the final norm for the last block.
    pub fn normed_block_output(&self, i: usize) -> Option<&V> {
        if i + 1 < self.layers.len() {
            self.layers[i + 1].ln1_out.as_ref()
        } else if i + 1 == self.layers.len() {
            self.final_norm_out.as_ref()
        } else {
            None
        }
    }

    /// Post-LayerNorm view of the embedding output.
    pub fn normed_embedding(&self) -> Option<&V> {
        self.layers.first().and_then(|l| l.ln1_out.as_ref())
    }

    /// Every captured LayerNorm output in network order.
    pub fn norm_sites(&self) -> Vec<&V> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.ln1_out.as_ref());
            out.extend(l.ln2_out.as_ref());
        }
        out.extend(self.final_norm_out.as_ref());
        out
    }
}

//! Per-layer key/value store. With a capacity `W`, absolute position `i`
//! lives in slot `i mod W` and overwrites whatever was `W` positions older.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    /// Absolute position held by each occupied slot.
    slot_positions: Vec<usize>,
    next_position: usize,
}

/// Keys and values visible to a layer, ordered by absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheView {
    pub positions: Vec<usize>,
    /// `[n, kv_width]`, or `None` when the layer holds nothing yet.
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    capacity: Option<usize>,
    kv_width: usize,
    layers: Vec<LayerCache>,
}

impl KvCache {
    /// `capacity = None` keeps every position.
    pub fn new(n_layers: usize, kv_width: usize, capacity: Option<usize>) -> Self {
        assert_ne!(capacity, Some(0), "cache capacity must be positive");
        let layer = LayerCache {
            keys: Vec::new(),
            values: Vec::new(),
            slot_positions: Vec::new(),
            next_position: 0,
        };
        Self {
            capacity,
            kv_width,
            layers: vec![layer; n_layers],
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Next position to be written in layer 0.
    pub fn next_position(&self) -> usize {
        self.layers.first().map_or(0, |l| l.next_position)
    }

    pub fn slot_for(&self, position: usize) -> usize {
        match self.capacity {
            Some(w) => position % w,
            None => position,
        }
    }

    /// Number of occupied slots in `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].slot_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.slot_positions.is_empty())
    }

    pub fn write(
        &mut self,
        layer: usize,
        position: usize,
        key: &[f32],
        value: &[f32],
    ) -> Result<()> {
        let width = self.kv_width;
        let slot = self.slot_for(position);
        let lc = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Usage(format!("layer {layer} out of range")))?;
        if position != lc.next_position {
            return Err(Error::Usage(format!(
                "out-of-order cache write at layer {layer}: expected position {}, got {position}",
                lc.next_position
            )));
        }
        if key.len() != width || value.len() != width {
            return Err(Error::dim(
                "cache_write",
                &[key.len(), value.len()],
                &[width, width],
            ));
        }
        if slot == lc.slot_positions.len() {
            lc.keys.extend_from_slice(key);
            lc.values.extend_from_slice(value);
            lc.slot_positions.push(position);
        } else {
            lc.keys[slot * width..(slot + 1) * width].copy_from_slice(key);
            lc.values[slot * width..(slot + 1) * width].copy_from_slice(value);
            lc.slot_positions[slot] = position;
        }
        lc.next_position += 1;
        Ok(())
    }

    /// Absolute positions currently held by `layer`, in slot order.
    pub fn slot_positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer].slot_positions
    }

    /// Contents of `layer` sorted by absolute position.
    pub fn view(&self, layer: usize) -> Result<CacheView> {
        let lc = &self.layers[layer];
        let mut order: Vec<usize> = (0..lc.slot_positions.len()).collect();
        order.sort_by_key(|&s| lc.slot_positions[s]);
        let positions: Vec<usize> = order.iter().map(|&s| lc.slot_positions[s]).collect();
        if order.is_empty() {
            return Ok(CacheView {
                positions,
                keys: None,
                values: None,
            });
        }
        let w = self.kv_width;
        let gather = |buf: &[f32]| -> Result<Tensor> {
            let data = order
                .iter()
                .flat_map(|&s| buf[s * w..(s + 1) * w].iter().copied())
                .collect();
            Tensor::from_vec(&[order.len(), w], data)
        };
        Ok(CacheView {
            keys: Some(gather(&lc.keys)?),
            values: Some(gather(&lc.values)?),
            positions,
        })
    }
}

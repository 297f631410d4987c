use serde::{Deserialize, Serialize};

use super::{Encoded, Model, ModelError};
use crate::nn::{Graph, Tensor, Var};
use crate::taskgen::{BOS, EOS};
use crate::Scalar;

/// How encoder outputs become codes inside the loss.
#[derive(Debug, Clone)]
pub enum QuantMode<T> {
    /// Nearest codebook row with a straight-through gradient.
    Nearest,
    /// Fixed assignment: the quantized value is `e + offsets` and `ids` are the codes.
    /// With offsets `c[ids] - e0` this equals nearest quantization at `e0` while staying
    /// differentiable, which makes the loss checkable by finite differences.
    Frozen { ids: Vec<usize>, offsets: Tensor<T> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub autoencoder: f64,
    pub latent: f64,
    pub end_to_end: f64,
    pub commitment: f64,
}

pub struct LossOutput<T> {
    pub loss: Var,
    pub parts: LossParts,
    /// Encoder outputs and their codes, for the codebook update.
    pub encodings: Tensor<T>,
    pub codes: Vec<usize>,
    /// Latent length of each program.
    pub latent_lens: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// Training loss of a batch. During pretraining the decoder reads block-averaged program
    /// embeddings instead of codes and the end-to-end term is skipped.
    pub fn compute_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[&Encoded],
        pretraining: bool,
        mode: &QuantMode<T>,
    ) -> Result<LossOutput<T>, ModelError> {
        let programs: Vec<&[usize]> = batch
            .iter()
            .map(|b| b.program.as_deref().filter(|p| !p.is_empty()).ok_or(ModelError::MissingProgram))
            .collect::<Result<_, _>>()?;
        let ios: Vec<_> = batch.iter().map(|b| &b.io).collect();
        let spec = self.encode_spec(g, &ios);

        let prefixes: Vec<Vec<usize>> = programs.iter().map(|p| [&[BOS][..], p].concat()).collect();
        let targets: Vec<Option<usize>> =
            programs.iter().flat_map(|p| p.iter().copied().chain([EOS])).map(Some).collect();
        let items: Vec<(usize, &[usize])> = prefixes.iter().enumerate().map(|(j, q)| (j, q.as_slice())).collect();

        if self.config.baseline {
            let logits = self.decoder_logits(g, &spec, &items, None);
            let loss = g.cross_entropy(logits, &targets);
            let v = g.value(loss).item().f64();
            let parts = LossParts { total: v, autoencoder: v, ..Default::default() };
            return Ok(LossOutput { loss, parts, encodings: Tensor::zeros(0, self.d()), codes: vec![], latent_lens: vec![] });
        }

        let (e, lens) = self.program_encode(g, &programs);
        let encodings = g.value(e).clone();
        let (quantized, codes) = match mode {
            QuantMode::Nearest => self.codebook.straight_through(g, e),
            QuantMode::Frozen { ids, offsets } => {
                assert_eq!(ids.len(), encodings.rows(), "one frozen id per latent position");
                let o = g.constant(offsets.clone());
                (g.add(e, o), ids.clone())
            }
        };
        // While pretraining nothing downstream reads the encoder, and commitment alone would
        // pull every encoding onto a single code; the term is reported but not trained.
        let committed = if pretraining {
            let stopped = match mode {
                QuantMode::Nearest => encodings.clone(),
                QuantMode::Frozen { ids, offsets } => {
                    let rows = self.codebook.lookup(ids);
                    let data = rows.data().iter().zip(offsets.data()).map(|(&c, &o)| c - o).collect();
                    Tensor::from_rows(rows.rows(), rows.cols(), data)
                }
            };
            g.constant(stopped)
        } else {
            e
        };
        let commitment = self.codebook.commitment_loss(g, committed, &codes);

        let z_ae = if pretraining { self.averaged_embeddings(g, &programs).0 } else { quantized };
        let logits = self.decoder_logits(g, &spec, &items, Some((z_ae, &lens)));
        let autoencoder = g.cross_entropy(logits, &targets);

        let k = self.config.codes;
        let mut code_lists = Vec::with_capacity(batch.len());
        let mut lp_targets = Vec::new();
        let mut start = 0;
        for &n in &lens {
            let c = &codes[start..start + n];
            lp_targets.extend(c.iter().map(|&x| Some(x)).chain([Some(k)]));
            code_lists.push(c);
            start += n;
        }
        let lp_items: Vec<(usize, &[usize])> = code_lists.iter().enumerate().map(|(j, c)| (j, *c)).collect();
        let lp_logits = self.latent_logits(g, &spec, &lp_items);
        let latent = g.cross_entropy(lp_logits, &lp_targets);

        let mut terms = vec![autoencoder, latent, commitment];
        let mut end_to_end = None;
        if !pretraining {
            // Predicted distributions at the ground-truth positions, EOS column dropped.
            let code_logits = g.slice_cols(lp_logits, 0, k);
            let probs = g.softmax(code_logits);
            let mut rows = Vec::new();
            let mut row = 0;
            for &n in &lens {
                rows.extend(row..row + n);
                row += n + 1;
            }
            let probs = g.gather(probs, &rows);
            let z_soft = self.codebook.soft_mix(g, probs);
            let logits = self.decoder_logits(g, &spec, &items, Some((z_soft, &lens)));
            let e2e = g.cross_entropy(logits, &targets);
            terms.push(e2e);
            end_to_end = Some(e2e);
        }
        let loss = g.sum_scalars(&terms);
        let item = |g: &Graph<T>, v: Var| g.value(v).item().f64();
        let parts = LossParts {
            total: item(g, loss),
            autoencoder: item(g, autoencoder),
            latent: item(g, latent),
            end_to_end: end_to_end.map_or(0.0, |v| item(g, v)),
            commitment: item(g, commitment),
        };
        Ok(LossOutput { loss, parts, encodings, codes, latent_lens: lens })
    }
}

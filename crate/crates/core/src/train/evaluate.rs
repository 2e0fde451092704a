use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::{Real, Tensor};

/// Row-wise argmax of `[N, K]` logits; ties go to the lowest class index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let &[_, k] = logits.shape() else {
        return Err(Error::shape("argmax", format!("expected [N, K], got {:?}", logits.shape())));
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Predicted class per sample of `data`, in dataset order.
pub fn predict<T: Real>(net: &Network<T>, data: &Dataset<T>, batch_size: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for batch in data.sequential(batch_size)? {
        out.extend(argmax_rows(&net.logits(&batch.images)?)?);
    }
    Ok(out)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    let pred = predict(net, data, batch_size)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

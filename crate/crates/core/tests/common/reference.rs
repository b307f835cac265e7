//! The extractor with plain, unadapted Q/K/V projections, built from the
//! same tape operations. Used to check that fresh adapters change nothing.

use mciprog::stem::{bridge, feature_head, stem_forward, Extractor};
use mciprog::tensor::{Bound, Tape, Tensor, Var};
use mciprog::vit::{patchify, EncoderBlock, VitEncoder};

/// The same block with plain projections in place of the adapted ones.
pub fn plain_block(tape: &mut Tape, p: &Bound, x: Var, block: &EncoderBlock) -> Var {
    let n = tape.layer_norm(x, p[block.ln1.0], p[block.ln1.1], 1e-6).unwrap();
    let q = tape.linear(n, p[block.wq]).unwrap();
    let k = tape.linear(n, p[block.wk]).unwrap();
    let v = tape.linear(n, p[block.wv]).unwrap();
    let d = tape.value(x).shape()[1];
    let dh = d / block.heads;
    let heads: Vec<Var> = (0..block.heads)
        .map(|h| {
            let qh = tape.slice(q, 1, h * dh, dh).unwrap();
            let kh = tape.slice(k, 1, h * dh, dh).unwrap();
            let vh = tape.slice(v, 1, h * dh, dh).unwrap();
            let s = tape.linear(qh, kh).unwrap();
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s).unwrap();
            tape.matmul(a, vh).unwrap()
        })
        .collect();
    let merged = tape.concat(&heads, 1).unwrap();
    let attn = tape.linear(merged, p[block.wo]).unwrap();
    let x = tape.add(x, attn).unwrap();
    let n = tape.layer_norm(x, p[block.ln2.0], p[block.ln2.1], 1e-6).unwrap();
    let hdn = tape.linear(n, p[block.mlp_in.0]).unwrap();
    let hdn = tape.add_row(hdn, p[block.mlp_in.1]).unwrap();
    let hdn = tape.gelu(hdn);
    let out = tape.linear(hdn, p[block.mlp_out.0]).unwrap();
    let out = tape.add_row(out, p[block.mlp_out.1]).unwrap();
    tape.add(x, out).unwrap()
}

pub fn plain_encoder(tape: &mut Tape, p: &Bound, image: Var, enc: &VitEncoder) -> Var {
    let mut x = patchify(tape, p, image, &enc.embedding).unwrap();
    for block in &enc.blocks {
        x = plain_block(tape, p, x, block);
    }
    tape.layer_norm(x, p[enc.final_norm.0], p[enc.final_norm.1], 1e-6).unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Features and logits of `model` with every adapter left out.
pub fn plain_extractor(model: &Extractor, image: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone());
    let s = stem_forward(&mut tape, &p, x, &model.stem).unwrap();
    let s = bridge(&mut tape, &p, s, &model.bridge).unwrap();
    let tokens = plain_encoder(&mut tape, &p, s, &model.encoder);
    let (f, l) = feature_head(&mut tape, &p, tokens, &model.head).unwrap();
    (tape.value(f).clone(), tape.value(l).clone())
}

//! Hard keyword selection on a toy codebook, and the straight-through
//! gradient that follows the soft path.
//!
//! cargo run --example vq_straight_through

use speechclip::diffcore::{Graph, Tensor};
use speechclip::model::vq::{quantize, vq_similarity, vq_soft};

fn main() -> speechclip::Result<()> {
    let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.6, 0.8]])?;
    let z = Tensor::from_rows(&[vec![0.9, 0.3], vec![-0.2, 1.0]])?;
    let weights = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]])?;

    for tau in [1.0, 0.1, 0.01] {
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let q = quantize(&mut g, zv, &table, tau)?;
        let w = g.constant(weights.clone());
        let p = g.mul(q.keywords, w)?;
        let loss = g.sum(p);
        let st = g.backward(loss)?.get(zv).cloned().expect("gradient reaches z");

        let mut h = Graph::new();
        let zs = h.param(z.clone());
        let s = vq_similarity(&mut h, zs, &table)?;
        let soft = vq_soft(&mut h, s, tau, &table)?;
        let w = h.constant(weights.clone());
        let p = h.mul(soft, w)?;
        let loss = h.sum(p);
        let sg = h.backward(loss)?.get(zs).cloned().expect("gradient reaches z");

        println!("tau = {tau}");
        println!("  keywords        {:?}", q.indices);
        println!("  forward (hard)  {:?}", g.value(q.keywords).data());
        println!("  soft mixture    {:?}", g.value(q.soft).data());
        println!("  grad via ST     {:?}", st.data());
        println!("  grad via soft   {:?}", sg.data());
        println!("  identical       {}", st.data() == sg.data());
    }
    Ok(())
}

//! Every evaluation metric on small hand-made inputs.

use et_fuser::metrics::{accuracy, cs_at, f1_macro, intra_class_variance, nme, tar_at_far};
use et_fuser::tasks::wing;
use et_fuser::tensor::Rng;
use et_fuser::Result;

fn main() -> Result<()> {
    // Landmarks: two eyes 10 units apart, every point off by (0.5, 0).
    let gt = [[0.0, 0.0], [10.0, 0.0], [5.0, 5.0], [5.0, 9.0]];
    let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 0.5, p[1]]).collect();
    println!("nme            {:.2}%", nme(&pred, &gt, gt[0], gt[1])?);

    let age_errors = [0.5, 2.0, 4.9, 5.0, 7.5, 12.0];
    println!("cs@5           {:.1}%", cs_at(&age_errors, 5.0)?);

    let truth = [0, 0, 1, 1, 2, 2, 2];
    let guess = [0, 1, 1, 1, 2, 0, 2];
    println!("accuracy       {:.3}", accuracy(&guess, &truth)?);
    println!("f1 (macro)     {:.3}", f1_macro(&guess, &truth, 3)?);

    let a = [1.0, 0.0];
    let b = [0.9, 0.1];
    let c = [0.0, 1.0];
    let d = [0.1, 0.8];
    let items: Vec<(&[f64], usize)> = vec![(&a, 0), (&b, 0), (&c, 1), (&d, 1)];
    println!("intra-class    {:.4}", intra_class_variance(&items)?);

    let mut rng = Rng::new(5);
    let genuine: Vec<f64> = (0..2000).map(|_| 2.0 + rng.normal()).collect();
    let impostor: Vec<f64> = (0..5000).map(|_| rng.normal()).collect();
    let t = tar_at_far(&genuine, &impostor, 1e-3)?;
    println!("tar@far=0.1%   {:.3} at threshold {:?}", t.tar, t.threshold);

    for x in [0.5, 9.999, 10.0, 10.001, 20.0] {
        println!("wing({x:>6})   {:.5}", wing(x, 10.0, 2.0));
    }
    Ok(())
}

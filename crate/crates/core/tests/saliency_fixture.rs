use g3d_core::qadg::build_qadg;
use g3d_core::render;
use g3d_core::saliency::{saliency_grad, saliency_trans, taylor_saliency};
use g3d_core::scene::Camera;
use g3d_core::synth::{synthesize_scene, Layout};
use g3d_core::Image;

#[test]
fn occlusion_pair_separates_render_saliency_from_taylor() {
    let fx = synthesize_scene(7, 64, Layout::OcclusionPair).unwrap();
    let (front, rear) = fx.occlusion_pair.unwrap();
    let scene = &fx.initial;
    let cams: Vec<&Camera> = fx.cameras.iter().collect();
    let tgts: Vec<&Image> = fx.images.iter().collect();

    let renders: Vec<_> = cams.iter().map(|c| render::render(scene, c).unwrap()).collect();
    for r in &renders {
        let (f, b) = (r.per_gaussian_transmittance[front], r.per_gaussian_transmittance[rear]);
        assert!(f >= 100.0 * b, "front {f:e} rear {b:e}");
    }
    let t = saliency_trans(&renders).unwrap();
    let g = saliency_grad(scene, &cams, &tgts).unwrap();
    let ty = taylor_saliency(scene, &cams, &tgts).unwrap();
    let ratio = |v: &[f64]| v[rear] / v[front];
    println!("trans {:e} grad {:e} taylor {:e}", ratio(&t), ratio(&g), ratio(&ty));
    assert!(ratio(&t) < 1e-3);
    assert!(ratio(&g) < 1e-3);
    assert!(ratio(&ty) > 1e-2);

    let graph = build_qadg(scene, &fx.cameras, 8, 0).unwrap();
    let w = graph.edge_weight(rear, front);
    println!("edge rear->front {w:e}, front->rear {:e}", graph.edge_weight(front, rear));
    assert!(w > 0.0 && w < 1e-3 * t[front]);
    assert_eq!(graph.edge_weight(front, rear), 0.0);
}

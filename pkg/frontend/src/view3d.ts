// Diagnostic 3D viewport: orbit camera, ground grid, the wireframe
// registration cube, and one gizmo box per shared object. Dragging an
// object maps pointer motion onto the ground plane and reports it back,
// so the session layer can claim ownership and stream pose updates.

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { SessionState } from "./session";
import { Vec3 } from "./math";

export type DragCallbacks = {
  onGrab: (objectId: number) => boolean;
  onDrag: (objectId: number, position: Vec3) => void;
  onRelease: (objectId: number) => void;
};

export class SceneView {
  private renderer: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private controls: OrbitControls;
  private gizmos = new Map<number, THREE.Mesh>();
  private tagCube: THREE.LineSegments | null = null;
  private raycaster = new THREE.Raycaster();
  private groundPlane = new THREE.Plane(new THREE.Vector3(0, 1, 0), -0.1);
  private dragging: number | null = null;
  private lastRevision = -1;

  constructor(canvas: HTMLCanvasElement, private callbacks: DragCallbacks) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(
      60, canvas.clientWidth / Math.max(1, canvas.clientHeight), 0.01, 100,
    );
    this.camera.position.set(2.5, 2.0, 3.5);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.target.set(0, 0.5, 0);

    this.scene.background = new THREE.Color(0x10141c);
    this.scene.add(new THREE.GridHelper(10, 20, 0x3a4a5a, 0x222c38));
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.7));
    const sun = new THREE.DirectionalLight(0xffffff, 1.2);
    sun.position.set(3, 5, 2);
    this.scene.add(sun);

    canvas.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    canvas.addEventListener("pointermove", (e) => this.onPointerMove(e));
    window.addEventListener("pointerup", () => this.onPointerUp());
  }

  private pointerRay(event: PointerEvent): THREE.Raycaster {
    const rect = (event.target as HTMLCanvasElement).getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((event.clientX - rect.left) / rect.width) * 2 - 1,
      -((event.clientY - rect.top) / rect.height) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    return this.raycaster;
  }

  private onPointerDown(event: PointerEvent) {
    const hits = this.pointerRay(event).intersectObjects([...this.gizmos.values()]);
    if (!hits.length) return;
    const objectId = hits[0].object.userData.objectId as number;
    if (this.callbacks.onGrab(objectId)) {
      this.dragging = objectId;
      this.controls.enabled = false;
      this.groundPlane.constant = -hits[0].object.position.y;
    }
  }

  private onPointerMove(event: PointerEvent) {
    if (this.dragging === null) return;
    const point = new THREE.Vector3();
    if (this.pointerRay(event).ray.intersectPlane(this.groundPlane, point)) {
      this.callbacks.onDrag(this.dragging, { x: point.x, y: point.y, z: point.z });
    }
  }

  private onPointerUp() {
    if (this.dragging !== null) {
      this.callbacks.onRelease(this.dragging);
      this.dragging = null;
      this.controls.enabled = true;
    }
  }

  // Reconcile gizmos with the session's scene mirror.
  sync(state: SessionState, selfId: string | null) {
    if (state.revision === this.lastRevision) return;
    this.lastRevision = state.revision;

    if (state.tagPose && !this.tagCube) {
      const geo = new THREE.EdgesGeometry(new THREE.BoxGeometry(0.2, 0.2, 0.2));
      this.tagCube = new THREE.LineSegments(
        geo, new THREE.LineBasicMaterial({ color: 0x44ff88 }),
      );
      this.scene.add(this.tagCube);
    }
    if (state.tagPose && this.tagCube) {
      const p = state.tagPose.position;
      const q = state.tagPose.rotation;
      this.tagCube.position.set(p.x, p.y, p.z);
      this.tagCube.quaternion.set(q.x, q.y, q.z, q.w);
    }
    if (!state.tagPose && this.tagCube) {
      this.scene.remove(this.tagCube);
      this.tagCube = null;
    }

    for (const [oid, gizmo] of this.gizmos) {
      if (!state.objects.has(oid)) {
        this.scene.remove(gizmo);
        this.gizmos.delete(oid);
      }
    }
    for (const obj of state.objects.values()) {
      let gizmo = this.gizmos.get(obj.objectId);
      if (!gizmo) {
        gizmo = new THREE.Mesh(
          new THREE.BoxGeometry(0.2, 0.2, 0.2),
          new THREE.MeshStandardMaterial({ color: 0x4488ff }),
        );
        gizmo.userData.objectId = obj.objectId;
        this.scene.add(gizmo);
        this.gizmos.set(obj.objectId, gizmo);
      }
      const { position: p, rotation: q, scale: s } = obj.pose;
      if (obj.animateFrom !== undefined && obj.animateStart !== undefined) {
        // Play the animation broadcast as a short tween toward the target.
        const age = performance.now() / 1000 - obj.animateStart;
        const alpha = Math.min(1, age / 0.6);
        const from = obj.animateFrom.position;
        gizmo.position.set(
          from.x + (p.x - from.x) * alpha,
          from.y + (p.y - from.y) * alpha,
          from.z + (p.z - from.z) * alpha,
        );
        if (alpha >= 1) obj.animateFrom = undefined;
        this.lastRevision = -1; // keep reconciling until the tween ends
      } else {
        gizmo.position.set(p.x, p.y, p.z);
      }
      gizmo.quaternion.set(q.x, q.y, q.z, q.w);
      gizmo.scale.set(s.x, s.y, s.z);
      const mine = obj.owner !== null && obj.owner === selfId;
      (gizmo.material as THREE.MeshStandardMaterial).color.set(
        obj.grabbedLocally ? 0xffaa33 : mine ? 0xcc8844 : 0x4488ff,
      );
    }
  }

  renderFrame() {
    const canvas = this.renderer.domElement;
    const w = canvas.clientWidth;
    const h = canvas.clientHeight;
    if (canvas.width !== w || canvas.height !== h) {
      this.renderer.setSize(w, h, false);
      this.camera.aspect = w / Math.max(1, h);
      this.camera.updateProjectionMatrix();
    }
    this.controls.update();
    this.renderer.render(this.scene, this.camera);
  }
}
